"""Unified multimodal prefix cache.

Two pools under one budget: a hash-keyed pool of encoded image tokens and a
radix tree over unified token sequences (image symbols followed by text
tokens). Tree nodes are span-compressed; each symbol carries a KV-token
weight so a whole image rides as a single weighted symbol. Matching pins
nodes via user counts; only unpinned leaves are evictable, least recently
used first.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Hashable, Sequence

from .core import MmsimError


class ReleaseWithoutMatch(MmsimError):
    """A handle was released twice or never issued by this tree."""


# --- image token pool ---

@dataclass
class _ImageEntry:
    token_count: int
    last_used: float
    bytes_estimate: int


class ImagePool:
    """LRU pool of encoded image tokens keyed by content hash."""

    def __init__(self, capacity_tokens: int):
        self.capacity = capacity_tokens
        self._entries: dict[str, _ImageEntry] = {}
        self.total_tokens = 0
        self.evictions = 0

    def lookup(self, content_hash: str, now: float) -> int | None:
        """Return the cached token count and refresh recency, or None."""
        entry = self._entries.get(content_hash)
        if entry is None:
            return None
        entry.last_used = now
        return entry.token_count

    def insert(self, content_hash: str, token_count: int, now: float,
               bytes_estimate: int = 0) -> bool:
        """Cache an encoding result; returns False if it cannot fit at all."""
        if content_hash in self._entries:
            self._entries[content_hash].last_used = now
            return True
        if token_count > self.capacity:
            return False
        self._evict(token_count - (self.capacity - self.total_tokens), now)
        if token_count > self.capacity - self.total_tokens:
            return False
        self._entries[content_hash] = _ImageEntry(token_count, now, bytes_estimate)
        self.total_tokens += token_count
        return True

    def _evict(self, needed: int, now: float) -> int:
        freed = 0
        while freed < needed and self._entries:
            victim = min(self._entries.items(), key=lambda kv: (kv[1].last_used, kv[0]))
            freed += victim[1].token_count
            self.total_tokens -= victim[1].token_count
            del self._entries[victim[0]]
            self.evictions += 1
        return freed

    def __len__(self) -> int:
        return len(self._entries)


# --- prefix tree pool ---

@dataclass
class PrefixNode:
    span: tuple[Hashable, ...]
    weights: tuple[int, ...]
    node_id: int
    children: dict[Hashable, "PrefixNode"] = field(default_factory=dict)
    user_count: int = 0
    last_used: float = 0.0

    @property
    def kv_tokens(self) -> int:
        return sum(self.weights)


class MatchHandle:
    """Pin on the matched path; the caller must release it exactly once.

    Entries are (node, covered_symbols) pairs; splits rewrite entries so the
    pin always covers the same logical token span.
    """

    def __init__(self, entries: list[list]):
        self.entries = entries  # each item: [PrefixNode, covered_symbol_count]
        self.released = False


class PrefixTree:
    """Span-compressed radix tree over weighted token sequences."""

    def __init__(self, capacity_tokens: int):
        self.capacity = capacity_tokens
        self._next_id = 1
        self.root = PrefixNode(span=(), weights=(), node_id=0)
        self.total_tokens = 0
        self.evictions = 0
        self.eviction_log: list[tuple[int, int, float]] = []  # (node_id, kv, last_used)
        self._live_handles: list[MatchHandle] = []
        self._increments = 0
        self._decrements = 0

    # -- matching --

    def match_prefix(self, tokens: Sequence[Hashable],
                     weights: Sequence[int] | None = None,
                     now: float = 0.0) -> tuple[int, MatchHandle]:
        """Longest cached prefix of `tokens`, in KV-token weight.

        Every touched node is pinned (+1 user_count) and its recency
        refreshed; release() the returned handle when the caller is done.
        """
        if weights is None:
            weights = [1] * len(tokens)
        matched_kv = 0
        entries: list[list] = []
        node = self.root
        pos = 0
        while pos < len(tokens):
            child = node.children.get(tokens[pos])
            if child is None:
                break
            common = 0
            while (common < len(child.span) and pos + common < len(tokens)
                   and child.span[common] == tokens[pos + common]):
                common += 1
            if common == 0:
                break
            matched_kv += sum(child.weights[:common])
            child.user_count += 1
            child.last_used = now
            self._increments += 1
            entries.append([child, common])
            if common < len(child.span):
                break
            pos += common
            node = child
        handle = MatchHandle(entries)
        self._live_handles.append(handle)
        return matched_kv, handle

    def release(self, handle: MatchHandle) -> None:
        if handle.released or handle not in self._live_handles:
            raise ReleaseWithoutMatch("handle already released or unknown")
        for node, _covered in handle.entries:
            if node.user_count <= 0:
                raise ReleaseWithoutMatch("user_count underflow")
            node.user_count -= 1
            self._decrements += 1
        handle.released = True
        self._live_handles.remove(handle)

    # -- insertion --

    def insert_prefix(self, tokens: Sequence[Hashable],
                      weights: Sequence[int] | None = None,
                      now: float = 0.0) -> int:
        """Cache a sequence, splitting/extending nodes as needed.

        Evicts to make room; if the budget still cannot hold the tail, the
        insert is trimmed (the stored prefix property is preserved).
        Returns the number of KV tokens newly added.
        """
        if weights is None:
            weights = [1] * len(tokens)
        node = self.root
        pos = 0
        added = 0
        while pos < len(tokens):
            child = node.children.get(tokens[pos])
            if child is None:
                span = tuple(tokens[pos:])
                wts = tuple(weights[pos:])
                kv = sum(wts)
                if not self._make_room(kv, now):
                    # trim: store as much of the tail as fits, whole symbols
                    span, wts, kv = self._trim_to_budget(span, wts, now)
                    if not span:
                        return added
                new = PrefixNode(span=span, weights=wts, node_id=self._next_id,
                                 last_used=now)
                self._next_id += 1
                node.children[span[0]] = new
                self.total_tokens += kv
                added += kv
                return added
            common = 0
            while (common < len(child.span) and pos + common < len(tokens)
                   and child.span[common] == tokens[pos + common]):
                common += 1
            child.last_used = now
            if common == len(child.span):
                pos += common
                node = child
                continue
            # diverged (or sequence ends) inside child's span: split it
            self._split(child, common)
            child.last_used = now
            pos += common
            node = child
        return added

    def _split(self, node: PrefixNode, at: int) -> None:
        """Split node's span at symbol index `at` (0 < at < len(span))."""
        bottom = PrefixNode(
            span=node.span[at:], weights=node.weights[at:],
            node_id=self._next_id, children=node.children,
            user_count=node.user_count, last_used=node.last_used)
        self._next_id += 1
        node.children = {bottom.span[0]: bottom}
        node.span = node.span[:at]
        node.weights = node.weights[:at]
        # rewrite outstanding pins that extend past the new top half
        for handle in self._live_handles:
            for entry in handle.entries:
                if entry[0] is node and entry[1] > at:
                    extra = entry[1] - at
                    entry[1] = at
                    handle.entries.append([bottom, extra])
                    self._increments += 1
                    break
        # pins that stopped inside the top half must not keep the bottom pinned
        pinned_bottom = sum(
            1 for h in self._live_handles for e in h.entries if e[0] is bottom)
        bottom.user_count = pinned_bottom
        pinned_top = sum(
            1 for h in self._live_handles for e in h.entries if e[0] is node)
        node.user_count = pinned_top

    def _trim_to_budget(self, span, wts, now) -> tuple[tuple, tuple, int]:
        free = self.capacity - self.total_tokens
        keep = 0
        kv = 0
        for w in wts:
            if kv + w > free:
                break
            kv += w
            keep += 1
        return span[:keep], wts[:keep], kv

    def _make_room(self, needed_tokens: int, now: float) -> bool:
        if needed_tokens > self.capacity:
            return False
        shortfall = needed_tokens - (self.capacity - self.total_tokens)
        if shortfall > 0:
            self.evict(shortfall, now)
        return needed_tokens <= self.capacity - self.total_tokens

    # -- eviction --

    def evict(self, needed_tokens: int, now: float = 0.0) -> int:
        """Free at least needed_tokens if possible; returns tokens freed.

        Removes unpinned leaves in ascending last-used order, one leaf at a
        time, so an ancestor is never dropped before its cached descendant.
        """
        freed = 0
        while freed < needed_tokens:
            victim = self._lru_idle_leaf()
            if victim is None:
                break
            parent, leaf = victim
            del parent.children[leaf.span[0]]
            self.total_tokens -= leaf.kv_tokens
            freed += leaf.kv_tokens
            self.evictions += 1
            self.eviction_log.append((leaf.node_id, leaf.kv_tokens, leaf.last_used))
        return freed

    def _lru_idle_leaf(self) -> tuple[PrefixNode, PrefixNode] | None:
        best: tuple[float, int, PrefixNode, PrefixNode] | None = None
        stack = [(self.root, child) for child in self.root.children.values()]
        while stack:
            parent, node = stack.pop()
            if node.children:
                stack.extend((node, c) for c in node.children.values())
                continue
            if node.user_count > 0:
                continue
            key = (node.last_used, node.node_id)
            if best is None or key < (best[0], best[1]):
                best = (node.last_used, node.node_id, parent, node)
        if best is None:
            return None
        return best[2], best[3]

    # -- introspection (tests and stats) --

    def iter_nodes(self):
        stack = list(self.root.children.values())
        while stack:
            node = stack.pop()
            yield node
            stack.extend(node.children.values())

    def cached_sequences(self) -> list[tuple[tuple, int]]:
        """All root-to-node sequences with their cumulative KV length."""
        out: list[tuple[tuple, int]] = []

        def walk(node: PrefixNode, prefix: tuple, kv: int):
            for child in node.children.values():
                seq = prefix + child.span
                total = kv + child.kv_tokens
                out.append((seq, total))
                walk(child, seq, total)

        walk(self.root, (), 0)
        return out

    @property
    def live_handle_count(self) -> int:
        return len(self._live_handles)

    @property
    def increments(self) -> int:
        return self._increments

    @property
    def decrements(self) -> int:
        return self._decrements


# --- the unified two-pool cache ---

@dataclass
class CacheStats:
    image_hits: int = 0
    image_misses: int = 0
    image_tokens_saved: int = 0
    prefix_lookups: int = 0
    prefix_hits: int = 0
    prefix_tokens_saved: int = 0
    evictions: int = 0

    def as_dict(self) -> dict:
        return {
            "image_hits": self.image_hits,
            "image_misses": self.image_misses,
            "image_tokens_saved": self.image_tokens_saved,
            "prefix_lookups": self.prefix_lookups,
            "prefix_hits": self.prefix_hits,
            "prefix_tokens_saved": self.prefix_tokens_saved,
            "evictions": self.evictions,
        }


class UnifiedCache:
    """Image pool plus prefix tree behind one budget split."""

    def __init__(self, budget_tokens: int, image_fraction: float = 0.2):
        image_budget = int(budget_tokens * image_fraction)
        self.images = ImagePool(image_budget)
        self.prefixes = PrefixTree(budget_tokens - image_budget)
        self.stats = CacheStats()

    def image_lookup(self, content_hash: str, now: float) -> int | None:
        found = self.images.lookup(content_hash, now)
        if found is None:
            self.stats.image_misses += 1
        else:
            self.stats.image_hits += 1
            self.stats.image_tokens_saved += found
        return found

    def image_insert(self, content_hash: str, token_count: int, now: float,
                     bytes_estimate: int = 0) -> bool:
        return self.images.insert(content_hash, token_count, now, bytes_estimate)

    def match_prefix(self, tokens: Sequence[Hashable], weights: Sequence[int],
                     now: float) -> tuple[int, MatchHandle]:
        matched, handle = self.prefixes.match_prefix(tokens, weights, now)
        self.stats.prefix_lookups += 1
        if matched > 0:
            self.stats.prefix_hits += 1
            self.stats.prefix_tokens_saved += matched
        return matched, handle

    def insert_prefix(self, tokens: Sequence[Hashable], weights: Sequence[int],
                      now: float) -> int:
        return self.prefixes.insert_prefix(tokens, weights, now)

    def release(self, handle: MatchHandle) -> None:
        self.prefixes.release(handle)

    def snapshot_stats(self) -> dict:
        doc = self.stats.as_dict()
        doc["evictions"] = self.images.evictions + self.prefixes.evictions
        doc["image_pool_tokens"] = self.images.total_tokens
        doc["prefix_pool_tokens"] = self.prefixes.total_tokens
        return doc
