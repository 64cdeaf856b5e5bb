"""Mini-batch training by gradient accumulation, with per-epoch metrics."""
from __future__ import annotations

import json
import logging
import time
from typing import Callable, Mapping, Sequence

from . import ndgrad as nd
from .config import RunConfig
from .datahub import ProblemInstance, evaluate_model
from .geokg import KGraph
from .lexvocab import build_source_vocab
from .model import S2GModel
from .optree import FormulaRegistry

log = logging.getLogger(__name__)


def build_model(train: Sequence[ProblemInstance], reg: FormulaRegistry, cfg: RunConfig,
                kg: KGraph | None = None, binding: dict | None = None) -> S2GModel:
    vocab = build_source_vocab([inst.tokens for inst in train], cfg.min_freq)
    return S2GModel(vocab, reg, kg, binding, emb_dim=cfg.emb_dim, hidden_dim=cfg.hidden_dim,
                    dropout=cfg.dropout, max_slots=cfg.slots, seed=cfg.seed)


def mean_loss(model: S2GModel, data: Sequence[ProblemInstance]) -> float:
    was = model.training
    model.train_mode(False)
    try:
        with nd.no_grad():
            z = model.kg_embeddings()
            return sum(model.loss(model.example(i), z).item() for i in data) / max(len(data), 1)
    finally:
        model.train_mode(was)


def train(model: S2GModel, data: Sequence[ProblemInstance], cfg: RunConfig,
          eval_sets: Mapping[str, Sequence[ProblemInstance]] | None = None,
          on_epoch: Callable[[int, list[dict]], bool] | None = None,
          metrics_path=None) -> list[dict]:
    """Train for ``cfg.epochs`` epochs; returns the metrics records (also written as JSON lines).

    Each optimizer step averages the losses of ``cfg.batch`` shuffled instances
    and recomputes the knowledge-graph embeddings once.  ``on_epoch`` may return
    True to stop early.
    """
    shuffle_rng = nd.make_rng(cfg.seed + 1)
    examples = [model.example(inst) for inst in data]
    eval_sets = dict(eval_sets or {})
    history: list[dict] = []
    sink = open(metrics_path, "w", encoding="utf-8") if metrics_path else None
    try:
        for epoch in range(1, cfg.epochs + 1):
            t0 = time.perf_counter()
            lr = nd.lr_schedule(epoch - 1, cfg.lr, cfg.lr_halve_every)
            model.train_mode(True)
            order = shuffle_rng.permutation(len(examples))
            total = 0.0
            for start in range(0, len(order), cfg.batch):
                batch = order[start:start + cfg.batch]
                z = model.kg_embeddings()
                losses = [model.loss(examples[i], z) for i in batch]
                step_loss = nd.scale(nd.sum_all(nd.concat(losses, axis=0)), 1.0 / len(batch))
                nd.backward(step_loss)
                nd.adam_step(model.store, lr, cfg.weight_decay, cfg.clip_norm)
                total += sum(l.item() for l in losses)
            model.train_mode(False)
            records = [{"epoch": epoch, "split": "train", "loss": total / len(examples),
                        "exact_match": None, "answer_acc": None, "lr": lr}]
            if eval_sets and (epoch % cfg.eval_every == 0 or epoch == cfg.epochs):
                for name, split in eval_sets.items():
                    m = evaluate_model(model, split, beam=1, max_nodes=cfg.max_nodes)
                    rec = {"epoch": epoch, "split": name, "loss": mean_loss(model, split),
                           "exact_match": m.exact_match, "answer_acc": m.answer_acc, "lr": lr}
                    if name == "train":
                        records[0].update(exact_match=m.exact_match, answer_acc=m.answer_acc)
                    else:
                        records.append(rec)
            history.extend(records)
            if sink:
                for rec in records:
                    sink.write(json.dumps(rec) + "\n")
                sink.flush()
            log.info("epoch %d loss %.4f lr %.2e (%.1fs)", epoch, records[0]["loss"], lr,
                     time.perf_counter() - t0)
            if on_epoch is not None and on_epoch(epoch, records):
                break
    finally:
        if sink:
            sink.close()
    return history
