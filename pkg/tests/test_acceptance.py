"""Acceptance criteria, one test per criterion. The terminal summary prints one line each."""

from __future__ import annotations

import json
import os
import random
import time
from pathlib import Path

import numpy as np
import pytest

from ferkit.cli import main
from ferkit.core import CANONICAL_ORDER, CotRecord, DatasetId, EvalRecord, ExtractionMethod, VqaRecord, label_set
from ferkit.curation import filter_records
from ferkit.extraction import extract_answer
from ferkit.metrics import accuracy, confusion, evaluate_records, per_class_f1
from ferkit.prompting import SEED_QUESTION
from ferkit.rlvr import ToyPolicy, check_gradients, group_advantages, reward, toy_rollout

from oracles import brute_accuracy, brute_class_scores, brute_confusion, brute_macro_f1, random_records

RATIO_TOL = 1e-12
ADV_TOL = 1e-9


def _check_against_oracle(recs, labels):
    gts = [r.gt for r in recs]
    preds = [r.extracted_label for r in recs]
    assert abs(accuracy(recs) - brute_accuracy(gts, preds)) <= RATIO_TOL
    rep = per_class_f1(recs, labels)
    for label, (p, r, f, s) in brute_class_scores(gts, preds, labels).items():
        got = rep[label]
        assert max(abs(got.precision - p), abs(got.recall - r), abs(got.f1 - f)) <= RATIO_TOL
        assert got.support == s
    assert abs(rep.macro_f1 - brute_macro_f1(gts, preds, labels)) <= RATIO_TOL
    cm = confusion(recs, labels)
    oracle = brute_confusion(gts, preds, labels)
    for i, g in enumerate(labels):
        assert cm.overflow[i] == oracle.get((g, None), 0)
        for j, p in enumerate(labels):
            assert cm.counts[i][j] == oracle.get((g, p), 0)


@pytest.mark.criterion(1, "metrics match brute-force oracle on 1,000 instances in < 10 s")
def test_criterion_1_metrics_oracle():
    rng = random.Random(20240601)
    t0 = time.perf_counter()
    for _ in range(1000):
        n = rng.randint(1, 500)
        datasets = rng.sample(list(DatasetId), rng.randint(1, 3))
        recs, start = [], 0
        for k, ds in enumerate(datasets):
            size = n // len(datasets) + (1 if k < n % len(datasets) else 0)
            if size:
                recs += random_records(rng, size, ds, fail_rate=rng.random() * 0.3, start=start)
                start += size
        report = evaluate_records(recs, "m")
        for ds, dsrep in report.per_dataset.items():
            sub = [r for r in recs if r.dataset is ds]
            _check_against_oracle(sub, label_set(ds))
            assert abs(dsrep.accuracy - brute_accuracy([r.gt for r in sub], [r.extracted_label for r in sub])) <= RATIO_TOL
        union = tuple(sorted({l for ds in report.per_dataset for l in label_set(ds)}, key=CANONICAL_ORDER.index))
        gts = [r.gt for r in recs]
        preds = [r.extracted_label for r in recs]
        assert abs(report.accuracy - brute_accuracy(gts, preds)) <= RATIO_TOL
        assert abs(report.macro_f1 - brute_macro_f1(gts, preds, union)) <= RATIO_TOL
        assert report.record_count == len(recs)
    elapsed = time.perf_counter() - t0
    assert elapsed < 10, f"{elapsed:.2f}s"


@pytest.mark.criterion(2, "GRPO and SFT gradients match central differences, max rel err <= 1e-6, < 5 s")
def test_criterion_2_gradient_check():
    t0 = time.perf_counter()
    result = check_gradients(instances=50, seed=0, step=1e-5, tol=1e-6)
    elapsed = time.perf_counter() - t0
    assert result["grpo"]["max_relative_error"] <= 1e-6, result
    assert result["sft"]["max_relative_error"] <= 1e-6, result
    assert elapsed < 5, f"{elapsed:.2f}s"


@pytest.mark.criterion(3, "advantages: mean 0, population std 1, shift/scale invariant, degenerate -> 0")
def test_criterion_3_advantage_invariants():
    rng = random.Random(3)
    for _ in range(10_000):
        g = rng.randint(2, 16)
        rewards = [rng.choice([0, 1, 2]) for _ in range(g)]
        adv = np.array(group_advantages(rewards))
        if len(set(rewards)) == 1:
            assert not adv.any()
            continue
        assert abs(adv.mean()) <= ADV_TOL
        assert abs(adv.std() - 1) <= ADV_TOL
    # exact-arithmetic cases: integer shifts and power-of-two scales keep every float exact
    # (group means are dyadic here; a mean like 7/6 rounds, so those groups are checked to 1e-12 instead)
    for rewards in ([0, 1, 2, 2], [2, 1, 0], [1, 1, 0, 0], [0, 2, 2, 2, 1, 1, 0, 0]):
        base = group_advantages(rewards)
        assert group_advantages([r + 3 for r in rewards]) == base
        assert group_advantages([r * 4 for r in rewards]) == base
        assert group_advantages([r * 0.5 - 1 for r in rewards]) == base
    for _ in range(1000):
        rewards = [rng.choice([0, 1, 2]) for _ in range(rng.randint(2, 16))]
        base = np.array(group_advantages(rewards))
        c, lam = rng.uniform(-10, 10), rng.uniform(0.01, 100)
        assert np.abs(np.array(group_advantages([lam * r + c for r in rewards])) - base).max() <= 1e-12
    for const in (0, 1, 2):
        assert group_advantages([const] * 5) == [0.0] * 5


def _fuzz_response(rng: random.Random) -> str:
    pieces = ["<think>", "</think>", "<answer>", "</answer>", "<ANSWER>", "<answer", "answer>", " ", "\n",
              "happy", "happiness", "fear", "anger", "contempt", "not", "joyful anger", "ſad", "é", "\x00", "<", ">",
              "/", "퟿", "🙂", "neutral", "Surprise", "xx"]
    return "".join(rng.choice(pieces) for _ in range(rng.randint(0, 12)))


@pytest.mark.criterion(4, "reward over 10^5 fuzzed strings: total in {0,1,2}; 2 for well-formed correct")
def test_criterion_4_reward_totality():
    rng = random.Random(4)
    labels = list(CANONICAL_ORDER)
    for i in range(100_000):
        gt = rng.choice(labels)
        if i % 10 == 0:
            text = f"{rng.choice(['', ' ', chr(10)])}<think>{_fuzz_response(rng).replace('<', '')}</think>" \
                   f"{rng.choice(['', ' '])}<answer>{rng.choice([gt.value, gt.value.upper(), ' ' + gt.value])}</answer>"
            r = reward(text, gt)
            assert r.total == 2, text
        else:
            r = reward(_fuzz_response(rng), gt)
        assert r.total in (0, 1, 2)
        assert r.total == r.acc + r.format


def _planted_corpus(rng: random.Random, n_malformed: int, n_mismatch: int, n_blur: int, n_good: int):
    labels = label_set("ferplus")
    rows = []

    def rec(i, label, raw):
        base = VqaRecord(f"p{i}", "ferplus", f"{i}.jpg", "q {x}", labels, label)
        return CotRecord.from_vqa(base, raw_output=raw)

    i = 0
    for _ in range(n_malformed):
        gt = rng.choice(labels)
        raw = rng.choice([
            f"<think>reasoning<answer>{gt.value}</answer>",
            f"reasoning</think><answer>{gt.value}</answer>",
            f"<answer>{gt.value}</answer>",
            "",
        ])
        rows.append(rec(i, gt, raw)); i += 1
    for _ in range(n_mismatch):
        gt = rng.choice(labels)
        other = rng.choice([l for l in labels if l is not gt])
        raw = rng.choice([f"<think>cues</think><answer>{other.value}</answer>", "<think>cues</think>no answer",
                          "<think>too blurry</think><answer>unsure</answer>"])
        rows.append(rec(i, gt, raw)); i += 1
    for _ in range(n_blur):
        gt = rng.choice(labels)
        phrase = rng.choice(["too blurry", "Low Resolution", "cannot discern", "image quality is too"])
        rows.append(rec(i, gt, f"<think>The {phrase} here.</think><answer>{gt.value}</answer>")); i += 1
    for _ in range(n_good):
        gt = rng.choice(labels)
        rows.append(rec(i, gt, f"<think>Visible cues support it.</think>\n<answer>{gt.value}</answer>")); i += 1
    rng.shuffle(rows)
    return rows


@pytest.mark.criterion(5, "QC filter: exact planted reject counts, idempotent, kept + rejected = input")
def test_criterion_5_qc_fidelity():
    rng = random.Random(5)
    for _ in range(50):
        counts = [rng.randint(0, 40) for _ in range(4)]
        corpus = _planted_corpus(rng, *counts)
        judged, report = filter_records(corpus)
        assert report.to_dict()["rejected"] == {
            "malformed_tags": counts[0], "answer_mismatch": counts[1], "blur_mention": counts[2]}
        assert report.kept == counts[3]
        assert report.kept + sum(report.rejected.values()) == report.input == len(corpus)
        again, report2 = filter_records(judged)
        assert again == judged and report2.to_dict() == report.to_dict()
        kept = [r for r in judged if r.reject_reason is None]
        kept_again, report3 = filter_records(kept)
        assert kept_again == kept and report3.kept == len(kept)


def _random_guess_accuracy(dataset: str, per_class: int, seed: int) -> float:
    rng = random.Random(seed)
    labels = label_set(dataset)
    recs = []
    for i, gt in enumerate(l for l in labels for _ in range(per_class)):
        guess = rng.choice(labels)
        res = extract_answer(f"<answer>{guess.value}</answer>", labels)
        recs.append(EvalRecord(f"g{i}", dataset, "random", "", res.label, res.method, gt))
    return evaluate_records(recs, "random").accuracy


@pytest.mark.criterion(6, "random guessing: 12.5% +/- 1 pp (8-class), 14.3% +/- 1 pp (7-class), >= 10k records")
def test_criterion_6_random_guess_baseline():
    acc8 = _random_guess_accuracy("ferplus", 1250, seed=6)  # 10,000 records
    acc7 = _random_guess_accuracy("rafdb", 1429, seed=7)  # 10,003 records
    assert abs(100 * acc8 - 12.5) <= 1.0, acc8
    assert abs(100 * acc7 - 14.3) <= 1.0, acc7


@pytest.mark.criterion(7, "extraction survives 10^6 fuzzed inputs; tagged round trip for all labels")
def test_criterion_7_extraction_fuzz():
    rng = random.Random(7)
    sets = (label_set("rafdb"), label_set("ferplus"))
    for i in range(1_000_000):
        cands = sets[i & 1]
        text = _fuzz_response(rng)
        payload = text.encode("utf-8", "surrogatepass") if i % 97 == 0 else text
        res = extract_answer(payload, cands)
        assert res.label is None or res.label in cands
    for cands in sets:
        for label in CANONICAL_ORDER:
            res = extract_answer(f"<think>r</think><answer>{label.value}</answer>", cands)
            if label in cands:
                assert res.label is label and res.method is ExtractionMethod.TAGGED
            else:
                assert res.label is None


PROTOCOL_ENV = ("FERKIT_ACCEPT_MANIFEST", "FERKIT_ACCEPT_IMAGES", "FERKIT_ACCEPT_ENDPOINT")


@pytest.mark.criterion(8, "protocol reproduction with user-supplied data and credentials (conditional)")
def test_criterion_8_protocol_reproduction(tmp_path):
    missing = [v for v in PROTOCOL_ENV if not os.environ.get(v)]
    if missing:
        pytest.skip(f"needs benchmark images and an endpoint; unset: {', '.join(missing)}")
    model = os.environ.get("FERKIT_ACCEPT_MODEL", "Qwen2.5-VL-7B-Instruct")
    expected = float(os.environ.get("FERKIT_ACCEPT_EXPECTED", "53.78"))
    out = tmp_path / "results"
    argv = [
        "evaluate", os.environ["FERKIT_ACCEPT_MANIFEST"], "--model", model, "--out", str(out),
        "--image-root", os.environ["FERKIT_ACCEPT_IMAGES"], "--endpoint", os.environ["FERKIT_ACCEPT_ENDPOINT"],
        "--api-key-env", os.environ.get("FERKIT_ACCEPT_KEY_ENV", "OPENAI_API_KEY"),
        "--cache-dir", os.environ.get("FERKIT_ACCEPT_CACHE", str(tmp_path / "cache")),
    ]
    assert main(argv) == 0
    report = json.loads(next(Path(out).rglob("report.json")).read_text())
    assert abs(100 * report["overall"]["accuracy"] - expected) <= 2.0


@pytest.mark.criterion(9, "assemble and toy_rollout are bit-identical across runs with equal seeds")
def test_criterion_9_determinism(tmp_path):
    pairs = tmp_path / "pairs.jsonl"
    rng = random.Random(9)
    rows = []
    for i in range(2000):
        ds = rng.choice(list(DatasetId))
        rows.append({"image": f"img/{i}.jpg", "label": rng.choice(label_set(ds)).value, "dataset": ds.value})
    pairs.write_text("".join(json.dumps(r) + "\n" for r in rows))
    pool = tmp_path / "pool.txt"
    pool.write_text(f"#seed: {SEED_QUESTION}\n" + "".join(f"Form {i}: choose from {{candidates}}\n" for i in range(100)))
    outs = []
    for k in range(2):
        out = tmp_path / f"out{k}.jsonl"
        assert main(["curate", "assemble", str(pairs), "--pool", str(pool), "--out", str(out),
                     "--seed", "1234", "--shuffle-candidates"]) == 0
        outs.append(out.read_bytes())
    assert outs[0] == outs[1]
    assert len(set(json.loads(line)["question"] for line in outs[0].splitlines())) > 50

    policy = ToyPolicy(np.random.default_rng(9).normal(size=(5, 10)))
    a = toy_rollout(policy, prompt_id=17, group_size=8, rng_seed=99)
    b = toy_rollout(policy, prompt_id=17, group_size=8, rng_seed=99)
    assert a.responses.tobytes() == b.responses.tobytes()
    assert a.old_logprobs.tobytes() == b.old_logprobs.tobytes()
