"""Code index and retrieval.

A trie over assigned code sequences maps every semantic ID to the items
carrying it (IDs are cluster labels: collisions are expected). Queries are
answered either generatively (beam search over per-step code distributions,
optionally constrained to prefixes present in the trie, then expanding the
top IDs to their item buckets) or densely (dot products of final decoder
states).

Also provides the hierarchical k-means coder used to build semantic codes
on top of plain embeddings for baseline comparisons.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from semidx import autodiff as ad
from semidx.metrics import RankedList
from semidx.model import SemanticId, TransformerModel


@dataclass
class _Node:
    children: dict[int, "_Node"] = field(default_factory=dict)
    items: list[tuple[int, str]] = field(default_factory=list)  # (insertion order, id)


class CodeIndex:
    """Trie over semantic IDs with an item-id reverse map."""

    def __init__(self, num_steps: int, codebook_size: int, checkpoint_hash: str = ""):
        self.num_steps = int(num_steps)
        self.codebook_size = int(codebook_size)
        self.checkpoint_hash = checkpoint_hash
        self.root = _Node()
        self.by_item: dict[str, SemanticId] = {}
        self._counter = 0

    def __len__(self) -> int:
        return len(self.by_item)

    def insert(self, item_id: str, sid: SemanticId) -> None:
        sid = tuple(int(c) for c in sid)
        if len(sid) > self.num_steps:
            raise ValueError(f"ID length {len(sid)} exceeds depth {self.num_steps}")
        if any(c < 0 or c >= self.codebook_size for c in sid):
            raise ValueError(f"code out of range in {sid}")
        if item_id in self.by_item:
            raise ValueError(f"item {item_id!r} already indexed")
        node = self.root
        for c in sid:
            node = node.children.setdefault(c, _Node())
        node.items.append((self._counter, item_id))
        self._counter += 1
        self.by_item[item_id] = sid

    def _find(self, prefix: SemanticId) -> _Node | None:
        node = self.root
        for c in prefix:
            node = node.children.get(int(c))
            if node is None:
                return None
        return node

    def has_prefix(self, prefix: SemanticId) -> bool:
        return self._find(prefix) is not None

    def children_of(self, prefix: SemanticId) -> list[int]:
        node = self._find(prefix)
        return sorted(node.children) if node is not None else []

    def items_under(self, prefix: SemanticId) -> list[str]:
        """All items whose ID extends ``prefix``, in insertion order."""
        node = self._find(prefix)
        if node is None:
            return []
        collected: list[tuple[int, str]] = []
        stack = [node]
        while stack:
            n = stack.pop()
            collected.extend(n.items)
            stack.extend(n.children.values())
        return [iid for _, iid in sorted(collected)]

    def validate(self) -> None:
        """Check the union/count invariants over the whole trie."""

        def walk(node: _Node) -> int:
            total = len(node.items)
            for child in node.children.values():
                total += walk(child)
            return total

        if walk(self.root) != len(self.by_item):
            raise AssertionError("trie item count does not match the reverse map")
        for item_id, sid in self.by_item.items():
            node = self._find(sid)
            if node is None or all(iid != item_id for _, iid in node.items):
                raise AssertionError(f"item {item_id!r} not found under its own ID")

    def save(self, path: str | Path) -> None:
        rows = sorted((list(sid), iid) for iid, sid in self.by_item.items())
        payload = {
            "version": 1,
            "checkpoint_hash": self.checkpoint_hash,
            "num_steps": self.num_steps,
            "codebook_size": self.codebook_size,
            "item_count": len(self.by_item),
            "assignments": rows,
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True), encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path, expected_checkpoint_hash: str | None = None) -> "CodeIndex":
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
        if payload.get("version") != 1:
            raise ValueError(f"unsupported index version {payload.get('version')!r}")
        if (expected_checkpoint_hash is not None
                and payload["checkpoint_hash"] != expected_checkpoint_hash):
            raise ValueError("index was built from a different model checkpoint")
        idx = cls(num_steps=payload["num_steps"], codebook_size=payload["codebook_size"],
                  checkpoint_hash=payload["checkpoint_hash"])
        for sid, item_id in payload["assignments"]:
            idx.insert(item_id, tuple(sid))
        if len(idx) != payload["item_count"]:
            raise ValueError("index item count mismatch")
        idx.validate()
        return idx


def assign_all_ids(model: TransformerModel, items: dict[str, list[int]], depth: int,
                   checkpoint_hash: str = "", chunk: int = 256) -> CodeIndex:
    """Greedy semantic IDs for a whole corpus (item id -> token ids)."""
    index = CodeIndex(num_steps=depth, codebook_size=model.config.codebook_size,
                      checkpoint_hash=checkpoint_hash)
    ids = list(items)
    for start in range(0, len(ids), chunk):
        batch_ids = ids[start:start + chunk]
        rows = [items[i] for i in batch_ids]
        width = max(len(r) for r in rows)
        tok = np.zeros((len(rows), width), dtype=np.int64)
        mask = np.zeros((len(rows), width))
        for i, r in enumerate(rows):
            tok[i, : len(r)] = r
            mask[i, : len(r)] = 1.0
        codes, _ = model.greedy_decode_batch(tok, mask, depth)
        for iid, row in zip(batch_ids, codes):
            index.insert(iid, tuple(int(c) for c in row))
    index.validate()
    return index


# ---------------------------------------------------------------------------
# beam search decoding
# ---------------------------------------------------------------------------

def beam_search_decode(model: TransformerModel, query_tokens, beam_width: int,
                       depth: int, constrain: bool = False,
                       index: CodeIndex | None = None,
                       temperature: float = 1.0) -> list[tuple[SemanticId, float]]:
    """Beam over per-step log code probabilities; score = summed log prob.

    With ``constrain`` set, only prefixes present in ``index`` survive.
    Results are sorted by descending score, ties broken by lexicographic ID,
    which makes width K^T exactly reproduce exhaustive sequence scoring.
    """
    if beam_width < 1:
        raise ValueError("beam width must be >= 1")
    if constrain and index is None:
        raise ValueError("constrained decoding needs an index")
    model._check_depth(depth)
    memory = model.encode(list(query_tokens))
    beams: list[tuple[SemanticId, float]] = [((), 0.0)]
    for t in range(1, depth + 1):
        candidates: list[tuple[SemanticId, float]] = []
        for prefix, score in beams:
            d_t = model.decode_step(memory, prefix, t)
            log_p = ad.log_softmax(model.codebooks[t - 1].logits(d_t),
                                   temperature=temperature).data
            allowed = (index.children_of(prefix) if constrain
                       else range(model.config.codebook_size))
            for c in allowed:
                candidates.append((prefix + (int(c),), score + float(log_p[int(c)])))
        candidates.sort(key=lambda pair: (-pair[1], pair[0]))
        beams = candidates[:beam_width]
        if not beams:
            return []
    return beams


def beam_search_decode_batch(model: TransformerModel, token_rows: list[list[int]],
                             beam_width: int, depth: int, constrain: bool = False,
                             index: CodeIndex | None = None, temperature: float = 1.0,
                             chunk: int = 128) -> list[list[tuple[SemanticId, float]]]:
    """Batched variant of ``beam_search_decode`` (same results per query)."""
    if beam_width < 1:
        raise ValueError("beam width must be >= 1")
    if constrain and index is None:
        raise ValueError("constrained decoding needs an index")
    model._check_depth(depth)
    out: list[list[tuple[SemanticId, float]]] = []
    for start in range(0, len(token_rows), chunk):
        rows = token_rows[start:start + chunk]
        width = max(len(r) for r in rows)
        tok = np.zeros((len(rows), width), dtype=np.int64)
        mask = np.zeros((len(rows), width))
        for i, r in enumerate(rows):
            tok[i, : len(r)] = r
            mask[i, : len(r)] = 1.0
        memory = model.encode_batch(tok, mask).data
        per_query: list[list[tuple[SemanticId, float]]] = [[((), 0.0)] for _ in rows]
        for t in range(1, depth + 1):
            flat_prefix: list[SemanticId] = []
            owners: list[int] = []
            for qi, beams in enumerate(per_query):
                for prefix, _ in beams:
                    flat_prefix.append(prefix)
                    owners.append(qi)
            if not flat_prefix:
                break
            prefix_arr = np.array([list(p) for p in flat_prefix],
                                  dtype=np.int64).reshape(len(flat_prefix), t - 1)
            mem_rep = ad.Tensor(memory[owners])
            mask_rep = mask[owners]
            states = model.decode_code_states(mem_rep, mask_rep, prefix_arr)
            d_t = states.data[:, t - 1, :]
            log_p = ad.log_softmax(
                ad.Tensor(d_t @ model.codebooks[t - 1].embeddings.data.T),
                temperature=temperature).data
            row = 0
            for qi, beams in enumerate(per_query):
                candidates: list[tuple[SemanticId, float]] = []
                for prefix, score in beams:
                    allowed = (index.children_of(prefix) if constrain
                               else range(model.config.codebook_size))
                    for c in allowed:
                        candidates.append((prefix + (int(c),),
                                           score + float(log_p[row][int(c)])))
                    row += 1
                candidates.sort(key=lambda pair: (-pair[1], pair[0]))
                per_query[qi] = candidates[:beam_width]
        out.extend(per_query)
    return out


def generative_retrieve(model: TransformerModel, index: CodeIndex, query_tokens,
                        beam_width: int, cutoff: int, query_id: str = "q",
                        temperature: float = 1.0,
                        beams: list[tuple[SemanticId, float]] | None = None) -> RankedList:
    """Expand the top beam IDs into their item buckets, best ID first.

    Items inside one bucket keep insertion order and share the ID's score.
    """
    if beams is None:
        beams = beam_search_decode(model, query_tokens, beam_width,
                                   depth=index.num_steps, constrain=True,
                                   index=index, temperature=temperature)
    item_ids: list[str] = []
    scores: list[float] = []
    seen: set[str] = set()
    for sid, score in beams:
        for iid in index.items_under(sid):
            if iid in seen:
                continue
            seen.add(iid)
            item_ids.append(iid)
            scores.append(score)
            if len(item_ids) >= cutoff:
                return RankedList(query_id=query_id, item_ids=item_ids, scores=scores)
    return RankedList(query_id=query_id, item_ids=item_ids, scores=scores)


# ---------------------------------------------------------------------------
# dense retrieval
# ---------------------------------------------------------------------------

def dense_rank(query_vec: np.ndarray, item_matrix: np.ndarray,
               item_ids: list[str], k: int, query_id: str = "q") -> RankedList:
    """Top-k items by dot product, descending; ties keep input order."""
    if k < 0:
        raise ValueError("k must be >= 0")
    scores = item_matrix @ np.asarray(query_vec, dtype=np.float64)
    k = min(k, len(item_ids))
    order = np.argsort(-scores, kind="stable")[:k]
    return RankedList(query_id=query_id,
                      item_ids=[item_ids[int(i)] for i in order],
                      scores=[float(scores[int(i)]) for i in order])


def item_representation_matrix(model: TransformerModel, items: dict[str, list[int]],
                               depth: int, chunk: int = 256) -> tuple[np.ndarray, list[str]]:
    """Final-step decoder states for every item, row-aligned with the ids."""
    ids = list(items)
    reps = np.zeros((len(ids), model.config.hidden_size))
    for start in range(0, len(ids), chunk):
        batch_ids = ids[start:start + chunk]
        rows = [items[i] for i in batch_ids]
        width = max(len(r) for r in rows)
        tok = np.zeros((len(rows), width), dtype=np.int64)
        mask = np.zeros((len(rows), width))
        for i, r in enumerate(rows):
            tok[i, : len(r)] = r
            mask[i, : len(r)] = 1.0
        _, final = model.greedy_decode_batch(tok, mask, depth)
        reps[start:start + len(rows)] = final
    return reps, ids


def dense_retrieve(model: TransformerModel, item_matrix: np.ndarray,
                   item_ids: list[str], query_tokens, depth: int, k: int,
                   query_id: str = "q") -> RankedList:
    q = model.final_representation(list(query_tokens), depth)
    return dense_rank(q, item_matrix, item_ids, k, query_id=query_id)


# ---------------------------------------------------------------------------
# hierarchical k-means baseline coder
# ---------------------------------------------------------------------------

def _kmeans_pp_init(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centers = np.empty((k, x.shape[1]))
    centers[0] = x[int(rng.integers(n))]
    d2 = ((x - centers[0]) ** 2).sum(axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            centers[j:] = x[int(rng.integers(n))]
            break
        probs = d2 / total
        centers[j] = x[int(rng.choice(n, p=probs))]
        d2 = np.minimum(d2, ((x - centers[j]) ** 2).sum(axis=1))
    return centers


def kmeans(x: np.ndarray, k: int, rng: np.random.Generator,
           iters: int = 20) -> np.ndarray:
    """Plain Lloyd iterations with k-means++ seeding; returns labels."""
    x = np.asarray(x, dtype=np.float64)
    centers = _kmeans_pp_init(x, k, rng)
    labels = np.zeros(x.shape[0], dtype=np.int64)
    for _ in range(iters):
        d2 = ((x[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
        labels = d2.argmin(axis=1)
        for j in range(k):
            members = x[labels == j]
            if len(members):
                centers[j] = members.mean(axis=0)
            else:
                # re-seed an empty cluster at the worst-served point
                centers[j] = x[int(d2.min(axis=1).argmax())]
    return labels


def hierarchical_kmeans_codes(embeddings: np.ndarray, k: int, depth: int,
                              seed: int) -> list[SemanticId]:
    """Recursive k-means codes, one list entry per embedding row.

    Branches with fewer points than ``k`` assign distinct codes and stop;
    k=1 degenerates to all-zero codes at every level.
    """
    embeddings = np.asarray(embeddings, dtype=np.float64)
    if not np.isfinite(embeddings).all():
        raise ValueError("embeddings must be finite")
    if k < 1:
        raise ValueError("k must be >= 1")
    rng = np.random.default_rng(seed)
    codes: list[list[int]] = [[] for _ in range(embeddings.shape[0])]

    def recurse(rows: np.ndarray, level: int) -> None:
        if level > depth or rows.size == 0:
            return
        points = embeddings[rows]
        if k == 1:
            labels = np.zeros(len(rows), dtype=np.int64)
        elif len(rows) < k:
            for code, r in enumerate(rows):
                codes[int(r)].append(code)
            return
        else:
            labels = kmeans(points, k, rng)
        for code in range(int(labels.max()) + 1):
            members = rows[labels == code]
            for r in members:
                codes[int(r)].append(code)
            recurse(members, level + 1)

    recurse(np.arange(embeddings.shape[0]), 1)
    return [tuple(c) for c in codes]
