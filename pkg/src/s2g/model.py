"""Sequence-to-general-tree network: BiGRU encoder, attentive token head, sibling-GRU children.

Decoding keeps a stack of pending nodes.  A popped node predicts its token; if
the token takes ``n`` arguments, ``n`` child states are produced by a GRU that
steps from the parent state through the siblings, and they are pushed so the
leftmost child is expanded next.  The emitted tokens are therefore the prefix
form of the tree.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Callable, NamedTuple, Sequence

import numpy as np

from . import geokg
from . import ndgrad as nd
from .lexvocab import SourceVocab, TargetVocab
from .optree import FormulaCall, FormulaRegistry, OpTree, from_prefix


class DecodeError(Exception):
    pass


class MaxNodesExceeded(DecodeError):
    pass


class NoHypothesisCompleted(DecodeError):
    pass


class EmptyInput(ValueError):
    pass


class Example(NamedTuple):
    src: list[int]                 # source token ids
    positions: tuple[int, ...]     # source position of each number slot
    target: list[int] | None       # gold prefix as target-vocab indices


@dataclass(frozen=True)
class Pending:
    """A node still to be realized."""
    state: nd.Tensor
    prev: nd.Tensor               # embedding of the parent's token (start embedding at the root)
    z_node: int                   # knowledge-graph node guiding this position


@dataclass(frozen=True)
class Hypothesis:
    tokens: tuple[int, ...]
    frontier: tuple
    logp: float

    @property
    def complete(self) -> bool:
        return not self.frontier


# ---------------------------------------------------------------- search (model-agnostic)
#
# step(entry) -> (log-probabilities over the target vocab, payload)
# expand(entry, payload, token) -> child entries, leftmost first

StepFn = Callable[[object], tuple[np.ndarray, object]]
ExpandFn = Callable[[object, object, int], list]


def _ranked(logp: np.ndarray, k: int) -> list[int]:
    ok = np.flatnonzero(np.isfinite(logp))
    order = ok[np.lexsort((ok, -logp[ok]))]
    return [int(i) for i in order[:k]]


def greedy_search(root, step: StepFn, expand: ExpandFn, arities: Sequence[int],
                  max_nodes: int = 50, force: Sequence[int] | None = None) -> tuple[list[int], float]:
    """Expand the top of the stack with its arg-max token until the stack empties.

    With ``force`` the listed tokens are taken instead of the arg-max, which scores
    a given prefix sequence along the inference path.
    """
    tokens: list[int] = []
    stack = [root]
    total = 0.0
    while stack:
        if len(tokens) + len(stack) > max_nodes:
            raise MaxNodesExceeded(f"tree would exceed {max_nodes} nodes")
        entry = stack.pop()
        logp, payload = step(entry)
        if force is not None:
            if len(tokens) >= len(force):
                raise DecodeError("forced sequence ended with open nodes")
            y = int(force[len(tokens)])
        else:
            ranked = _ranked(logp, 1)
            if not ranked:
                raise DecodeError("no admissible token")
            y = ranked[0]
        total += float(logp[y])
        tokens.append(y)
        if arities[y]:
            stack.extend(reversed(expand(entry, payload, y)))
    if force is not None and len(tokens) != len(force):
        raise DecodeError("forced sequence has trailing tokens")
    return tokens, total


def beam_search(root, step: StepFn, expand: ExpandFn, arities: Sequence[int],
                beam: int = 5, max_nodes: int = 50,
                seed_done: Sequence[tuple[Sequence[int], float]] = ()) -> tuple[list[int], float]:
    """Beam search over frontier expansions ranked by cumulative log-probability.

    Each round every live hypothesis proposes its ``beam`` best next tokens and the
    ``beam`` best proposals survive; completed ones leave the beam.  The search
    stops once no live hypothesis can beat the best completed one, since scores
    only fall as tokens are added.  ``seed_done`` adds externally found complete
    sequences to the competition.
    """
    live = [Hypothesis((), (root,), 0.0)]
    done = [Hypothesis(tuple(t), (), float(s)) for t, s in seed_done]
    while live:
        proposals = []
        for h in live:
            logp, payload = step(h.frontier[-1])
            for y in _ranked(logp, beam):
                score = h.logp + float(logp[y])
                if math.isfinite(score):
                    proposals.append((score, len(proposals), h, payload, y))
        proposals.sort(key=lambda p: (-p[0], p[1]))
        live = []
        for score, _, h, payload, y in proposals[:beam]:
            children = expand(h.frontier[-1], payload, y) if arities[y] else []
            frontier = h.frontier[:-1] + tuple(reversed(children))
            nxt = Hypothesis(h.tokens + (y,), frontier, score)
            if len(nxt.tokens) + len(frontier) > max_nodes:
                continue
            (done if nxt.complete else live).append(nxt)
        if done:
            best = max(h.logp for h in done)
            live = [h for h in live if h.logp > best]
    if not done:
        raise NoHypothesisCompleted(f"every hypothesis exceeded {max_nodes} nodes")
    best = max(done, key=lambda h: h.logp)
    return list(best.tokens), best.logp


# ---------------------------------------------------------------- network

@dataclass
class Encoded:
    h: nd.Tensor                  # (n, d) per-token states
    h_encoder: nd.Tensor          # (1, d) summary state
    h_proj_c: nd.Tensor           # H W_h for the context attention
    h_proj_z: nd.Tensor           # H W_h for the knowledge attention
    slot_reps: nd.Tensor | None   # (k, d): H[pos] W_slot
    slot_keys: nd.Tensor | None   # (d, k): (H[pos] W_slot W_n)^T, scored against s_t
    num_slots: int
    z: nd.Tensor                  # (nodes, d) GCN node embeddings


class S2GModel:
    def __init__(self, src_vocab: SourceVocab, reg: FormulaRegistry,
                 kg: geokg.KGraph | None = None, binding: dict | None = None,
                 emb_dim: int = 128, hidden_dim: int = 512, dropout: float = 0.5,
                 max_slots: int = 10, seed: int = 0):
        if kg is None:
            kg, binding = geokg.build_default_kg(reg)
        self.src_vocab = src_vocab
        self.reg = reg
        self.kg, self.binding = kg, binding
        self.tgt = TargetVocab(reg, max_slots)
        self.emb_dim, self.hidden_dim = emb_dim, hidden_dim
        self.dropout = dropout
        self.max_slots = max_slots
        self.seed = seed
        self.a_norm = nd.constant(geokg.normalize_adjacency(kg.adjacency))
        self.rng = nd.make_rng(seed)
        self.store = nd.ParamStore()
        self._init_params()
        self.training = False

    def _init_params(self):
        rng, s = self.rng, self.store
        e, d = self.emb_dim, self.hidden_dim
        n_static = self.tgt.num_static
        s.add("enc.emb", nd.init_embedding(rng, len(self.src_vocab), e))
        for direction in ("fwd", "bwd"):
            s.add(f"enc.{direction}.w_ih", nd.init_matrix(rng, e, 3 * d))
            s.add(f"enc.{direction}.w_hh", nd.init_matrix(rng, d, 3 * d))
            s.add(f"enc.{direction}.b_ih", np.zeros(3 * d))
            s.add(f"enc.{direction}.b_hh", np.zeros(3 * d))
        s.add("dec.emb", nd.init_embedding(rng, n_static, d))
        s.add("dec.start", nd.init_embedding(rng, 1, d))
        s.add("dec.w_slot", nd.init_matrix(rng, d, d))
        for att in ("att_c", "att_z"):
            s.add(f"dec.{att}.w_q", nd.init_matrix(rng, d, d))
            s.add(f"dec.{att}.w_h", nd.init_matrix(rng, d, d))
            s.add(f"dec.{att}.v", nd.init_matrix(rng, d, 1))
        s.add("dec.w_y", nd.init_matrix(rng, 4 * d, n_static))
        s.add("dec.w_n", nd.init_matrix(rng, d, d))
        s.add("dec.child.w_ih", nd.init_matrix(rng, 2 * d, 3 * d))
        s.add("dec.child.w_hh", nd.init_matrix(rng, d, 3 * d))
        s.add("dec.child.b_ih", np.zeros(3 * d))
        s.add("dec.child.b_hh", np.zeros(3 * d))
        s.add("dec.w_s", nd.init_matrix(rng, d, d))
        s.add("dec.b_s", np.zeros(d))
        s.add("gcn.x", nd.init_embedding(rng, len(self.kg.nodes), d))
        s.add("gcn.w0", nd.init_matrix(rng, d, d))
        s.add("gcn.w1", nd.init_matrix(rng, d, d))

    def __getitem__(self, name: str) -> nd.Tensor:
        return self.store[name]

    def train_mode(self, flag: bool = True):
        self.training = flag
        return self

    def _drop(self, t: nd.Tensor) -> nd.Tensor:
        return nd.dropout(t, self.dropout, self.training, self.rng)

    # ------------------------------------------------------------ encoder

    def encode_states(self, src: Sequence[int]) -> tuple[nd.Tensor, nd.Tensor]:
        """Per-token states (forward + backward, summed) and the summary state."""
        n = len(src)
        if n == 0:
            raise EmptyInput("cannot encode an empty sequence")
        d = self.hidden_dim
        emb = self._drop(nd.gather_rows(self["enc.emb"], src))
        zero = nd.constant(np.zeros((1, d)))
        runs = {}
        for direction, steps in (("fwd", range(n)), ("bwd", range(n - 1, -1, -1))):
            p = [self[f"enc.{direction}.{k}"] for k in ("w_ih", "w_hh", "b_ih", "b_hh")]
            h, out = zero, [None] * n
            for t in steps:
                h = nd.gru_cell(nd.gather_rows(emb, [t]), h, *p)
                out[t] = h
            runs[direction] = out
        fwd, bwd = runs["fwd"], runs["bwd"]
        states = nd.add(nd.concat(fwd, axis=0), nd.concat(bwd, axis=0))
        return self._drop(states), nd.add(bwd[0], fwd[n - 1])

    def kg_embeddings(self) -> nd.Tensor:
        return geokg.gcn_embed(geokg.GcnParams(self["gcn.x"], self["gcn.w0"], self["gcn.w1"]), self.a_norm)

    def encode(self, src: Sequence[int], positions: Sequence[int], z: nd.Tensor | None = None) -> Encoded:
        """Encoder states plus per-problem decoder caches; ``z`` reuses node embeddings."""
        h, h_enc = self.encode_states(src)
        k = len(positions)
        reps = slot_keys = None
        if k:
            reps = nd.gather_rows(h, list(positions)) @ self["dec.w_slot"]
            slot_keys = nd.transpose(reps @ self["dec.w_n"])
        z = self.kg_embeddings() if z is None else z
        return Encoded(h, h_enc, h @ self["dec.att_c.w_h"], h @ self["dec.att_z.w_h"],
                       reps, slot_keys, k, z)

    # ------------------------------------------------------------ decoder pieces

    def attend(self, query: nd.Tensor, h: nd.Tensor, h_proj: nd.Tensor, name: str) -> nd.Tensor:
        """Additive attention: score_i = v . tanh(W_q q + W_h h_i); returns sum_i a_i h_i."""
        q = query @ self[f"dec.{name}.w_q"]
        scores = nd.tanh(nd.add(h_proj, q)) @ self[f"dec.{name}.v"]
        alpha = nd.softmax(nd.transpose(scores))
        return alpha @ h

    def predict_token(self, enc: Encoded, state: nd.Tensor, prev: nd.Tensor, z: nd.Tensor,
                      allowed: np.ndarray | None = None) -> tuple[nd.Tensor, nd.Tensor]:
        """Distribution over the target vocabulary and the context vector c_t."""
        c = self.attend(prev, enc.h, enc.h_proj_c, "att_c")
        zc = self.attend(z, enc.h, enc.h_proj_z, "att_z")
        static = nd.concat([state, prev, c, zc]) @ self["dec.w_y"]
        parts = [static]
        if enc.num_slots:
            parts.append(state @ enc.slot_keys)
        pad = self.max_slots - enc.num_slots
        if pad:
            parts.append(nd.constant(np.zeros((1, pad))))
        mask = np.zeros(len(self.tgt), dtype=bool)
        mask[:self.tgt.num_static + enc.num_slots] = True
        if allowed is not None:
            mask &= allowed
        return nd.softmax(nd.concat(parts), mask), c

    def token_embedding(self, enc: Encoded, y: int) -> nd.Tensor:
        if y < self.tgt.num_static:
            return nd.gather_rows(self["dec.emb"], [y])
        # number slot: its position-grounded representation W_slot h[pos]
        return nd.gather_rows(enc.slot_reps, [y - self.tgt.num_static])

    def gen_children(self, state: nd.Tensor, e_y: nd.Tensor, c: nd.Tensor, n: int) -> list[nd.Tensor]:
        """n sibling states: s'_i = GRU([e_y; c], s_{i-1}), s_i = relu(W_s s'_i), s_0 = state."""
        if n < 1:
            raise ValueError("child count must be positive")
        x = nd.concat([e_y, c])
        p = [self[f"dec.child.{k}"] for k in ("w_ih", "w_hh", "b_ih", "b_hh")]
        out, prev = [], state
        for _ in range(n):
            s_raw = self._drop(nd.gru_cell(x, prev, *p))
            prev = nd.relu(nd.add(s_raw @ self["dec.w_s"], self["dec.b_s"]))
            out.append(prev)
        return out

    def example(self, inst) -> Example:
        """Model inputs for a problem instance (masked tokens, slots, optional gold prefix)."""
        target = None
        if getattr(inst, "prefix", None):
            target = [self.tgt.stoi[t] for t in inst.prefix]
        return Example(self.src_vocab.encode(inst.tokens), tuple(inst.slots.positions), target)

    def _root(self, enc: Encoded) -> Pending:
        return Pending(enc.h_encoder, self["dec.start"], self.kg.null_index)

    def _children(self, enc: Encoded, entry: Pending, c: nd.Tensor, y: int) -> list[Pending]:
        kind = self.tgt.kind(y)
        e_y = self.token_embedding(enc, y)
        states = self.gen_children(entry.state, e_y, c, kind.arity)
        parent = kind.name if isinstance(kind, FormulaCall) else None
        return [Pending(s, e_y, geokg.z_index(self.kg, self.binding, parent, i))
                for i, s in enumerate(states)]

    # ------------------------------------------------------------ training objective

    def loss(self, ex: Example, z: nd.Tensor | None = None) -> nd.Tensor:
        """Teacher-forced sum of -log P(gold token) over the gold tree in prefix order."""
        if not ex.target:
            raise ValueError("example has no gold target")
        enc = self.encode(ex.src, ex.positions, z)
        stack = [self._root(enc)]
        terms = []
        for y in ex.target:
            if not stack:
                raise ValueError("gold sequence continues past a complete tree")
            entry = stack.pop()
            dist, c = self.predict_token(enc, entry.state, entry.prev,
                                         nd.gather_rows(enc.z, [entry.z_node]))
            terms.append(nd.neg_log_pick(dist, y))
            if self.tgt.arities[y]:
                stack.extend(reversed(self._children(enc, entry, c, y)))
        if stack:
            raise ValueError("gold sequence ends with open nodes")
        return nd.sum_all(nd.concat(terms, axis=0))

    # ------------------------------------------------------------ inference

    def _search_fns(self, enc: Encoded, allowed: np.ndarray | None):
        def step(entry: Pending):
            dist, c = self.predict_token(enc, entry.state, entry.prev,
                                         nd.gather_rows(enc.z, [entry.z_node]), allowed)
            with np.errstate(divide="ignore"):
                return np.log(dist.data[0]), c

        def expand(entry: Pending, c, y: int):
            return self._children(enc, entry, c, y)

        return step, expand

    def decode(self, ex: Example, beam: int = 1, max_nodes: int = 50,
               allowed: np.ndarray | None = None, force: Sequence[int] | None = None
               ) -> tuple[list[int], float]:
        """Target indices of the decoded tree in prefix order, with their log-probability."""
        was = self.training
        self.training = False
        try:
            with nd.no_grad():
                enc = self.encode(ex.src, ex.positions)
                step, expand = self._search_fns(enc, allowed)
                root = self._root(enc)
                if force is not None or beam <= 1:
                    return greedy_search(root, step, expand, self.tgt.arities, max_nodes, force)
                try:
                    seed = [greedy_search(root, step, expand, self.tgt.arities, max_nodes)]
                except MaxNodesExceeded:
                    seed = []
                return beam_search(root, step, expand, self.tgt.arities, beam, max_nodes, seed)
        finally:
            self.training = was

    def decode_tree(self, ex: Example, beam: int = 1, max_nodes: int = 50) -> OpTree:
        tokens, _ = self.decode(ex, beam=beam, max_nodes=max_nodes)
        return from_prefix(self.tgt.decode(tokens), self.reg)

    # ------------------------------------------------------------ persistence

    def config(self) -> dict:
        return {"emb_dim": self.emb_dim, "hidden_dim": self.hidden_dim, "dropout": self.dropout,
                "max_slots": self.max_slots, "seed": self.seed}

    def save(self, path, extra: dict | None = None) -> None:
        meta = {"model": self.config(), "src_vocab": self.src_vocab.to_json(),
                "registry": self.reg.to_records(),
                "kg": {"nodes": [list(n) for n in self.kg.nodes],
                       "edges": [list(e) for e in self.kg.edges],
                       "binding": [[f, i, n] for (f, i), n in self.binding.items()]},
                **(extra or {})}
        nd.save_checkpoint(path, self.store, seed=self.seed, meta=meta)

    @classmethod
    def load(cls, path) -> "S2GModel":
        header, arrays = nd.read_checkpoint(path)
        meta = header["meta"]
        reg = FormulaRegistry.from_records(meta["registry"])
        kg_meta = meta["kg"]
        kg = geokg.KGraph(tuple(tuple(n) for n in kg_meta["nodes"]),
                          tuple(tuple(e) for e in kg_meta["edges"]))
        binding = {(f, int(i)): int(n) for f, i, n in kg_meta["binding"]}
        model = cls(SourceVocab.from_json(meta["src_vocab"]), reg, kg, binding, **meta["model"])
        nd.load_into(model.store, arrays, header.get("step", 0))
        model.meta = meta
        return model
