"""Shared fixtures: one small model trained to memorize 50 synthetic problems."""
from __future__ import annotations

import json
import time
from dataclasses import dataclass
from pathlib import Path

import pytest

from s2g.config import RunConfig
from s2g.datahub import load_records, synth_records
from s2g.optree import default_registry
from s2g.training import build_model, train

ANNULUS_TEXT = ("The outer radius and the inner radius of a circular annulus are 5 m and 3 m . "
                "Find the area of the annulus .")

OVERFIT_CONFIG = RunConfig(emb_dim=32, hidden_dim=64, dropout=0.0, batch=8, lr=3e-3,
                           lr_halve_every=100, epochs=300, eval_every=10, seed=0)


def overfit_records() -> list[dict]:
    """49 generated problems plus the annulus problem with radii 5 and 3."""
    annulus = {"id": "annulus", "text": ANNULUS_TEXT, "equation": "circle_area(5) - circle_area(3)",
               "answer": 50.24, "class": "formula-annotated"}
    return synth_records(49, seed=0) + [annulus]


@dataclass
class OverfitRun:
    model: object
    data: list
    history: list
    seconds: float
    checkpoint: Path
    data_path: Path


@pytest.fixture(scope="session")
def overfit_run(tmp_path_factory) -> OverfitRun:
    root = tmp_path_factory.mktemp("overfit")
    records = overfit_records()
    data_path = root / "train.jsonl"
    data_path.write_text("".join(json.dumps(r) + "\n" for r in records), encoding="utf-8")
    data = load_records(records).instances
    assert len(data) == 50
    model = build_model(data, default_registry(), OVERFIT_CONFIG)
    start = time.perf_counter()
    history = train(model, data, OVERFIT_CONFIG, eval_sets={"train": data})
    seconds = time.perf_counter() - start
    ckpt = root / "model.ckpt"
    model.save(ckpt)
    return OverfitRun(model, data, history, seconds, ckpt, data_path)


# ---------------------------------------------------------------- acceptance summary

ACCEPTANCE: dict[int, str] = {}


def record_criterion(number: int, passed: bool, detail: str) -> bool:
    ACCEPTANCE[number] = f"criterion {number}: {'PASS' if passed else 'FAIL'}  {detail}"
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
