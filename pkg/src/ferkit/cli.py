"""Command-line entry point: ``ferkit evaluate | curate | report | rlvr``.

Exit codes: 0 success, 1 fatal error, 2 usage error. Every run that gets past
argument parsing appends one manifest line to ``runs.jsonl`` in its output
directory.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import uuid
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path
from typing import Any, Callable, Sequence

from . import __version__
from .client import ChatRequest, ClientConfig, ModelClient
from .core import (
    CotRecord,
    EmotionLabel,
    EvalRecord,
    ExtractionMethod,
    LabelConfig,
    Lexicon,
    QcStatus,
    VqaRecord,
    label_set,
)
from .curation import (
    DEFAULT_BLUR_PHRASES,
    DEFAULT_STOP_WORDS,
    Pair,
    RuleTable,
    assemble_rlvr,
    dataset_stats,
    filter_records,
    load_phrases,
    rewrite_questions,
    synthesize_batch,
    word_frequencies,
)
from .errors import FerkitError, InvalidRecord
from .extraction import extract_answer
from .fileio import atomic_write_text, image_loader, iter_jsonl, read_records, write_json, write_jsonl
from .metrics import evaluate_records
from .prompting import SEED_QUESTION, SYSTEM_PROMPT, QuestionPool, render_question
from .report import confusion_artifacts, leaderboard_json, leaderboard_markdown, load_reports, model_slug
from .rlvr import check_gradients, reward

log = logging.getLogger("ferkit")

RUNS_FILE = "runs.jsonl"


def _now() -> str:
    return datetime.now(timezone.utc).isoformat()


@dataclass
class RunManifest:
    subcommand: str
    config: dict[str, Any]
    run_id: str = field(default_factory=lambda: uuid.uuid4().hex)
    inputs: list[str] = field(default_factory=list)
    outputs: list[str] = field(default_factory=list)
    started_at: str = field(default_factory=_now)
    ended_at: str | None = None
    counts: dict[str, Any] = field(default_factory=dict)
    status: str = "running"
    error: str | None = None

    def append_to(self, directory: Path) -> None:
        """Append one line; the file is rewritten through a rename so it is never truncated."""
        path = directory / RUNS_FILE
        old = path.read_text(encoding="utf-8") if path.exists() else ""
        if old and not old.endswith("\n"):
            old += "\n"
        atomic_write_text(path, old + json.dumps(asdict(self), ensure_ascii=False) + "\n")


# --- shared option groups -------------------------------------------------------

def _client_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    g = p.add_argument_group("model client")
    g.add_argument("--endpoint", default="http://localhost:8000/v1/chat/completions",
                   help="OpenAI-compatible chat-completions URL")
    g.add_argument("--api-key-env", default="OPENAI_API_KEY",
                   help="environment variable holding the bearer token (never logged)")
    g.add_argument("--concurrency", type=int, default=8, help="max requests in flight")
    g.add_argument("--retries", type=int, default=3, help="retries per request on 429/5xx/timeouts")
    g.add_argument("--timeout", type=float, default=120.0, help="per-request timeout in seconds")
    g.add_argument("--cache-dir", default=None, help="response cache directory (enables resume)")
    g.add_argument("--temperature", type=float, default=0.0, help="sampling temperature")
    g.add_argument("--max-output-tokens", type=int, default=2048)
    g.add_argument("--chunk-size", type=int, default=256,
                   help="records per batch; bounds memory held by encoded images")
    return p


def _label_options() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    p.add_argument("--label-config", default=None,
                   help='JSON file {"dataset": [labels...]} overriding the default label sets')
    p.add_argument("--lexicon", default=None, help="synonym lexicon file ('synonym = label' per line)")
    return p


def build_parser() -> argparse.ArgumentParser:
    client, labels = _client_options(), _label_options()
    parser = argparse.ArgumentParser(prog="ferkit", description="Facial-expression VQA evaluation and curation.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    ev = sub.add_parser("evaluate", parents=[client, labels], help="run a model over a VQA manifest and score it")
    ev.add_argument("manifest", help="JSONL of VQA records (id, dataset, image, label; question optional)")
    ev.add_argument("--model", required=True)
    ev.add_argument("--out", required=True, help="results directory; output goes to <out>/<model-slug>/")
    ev.add_argument("--image-root", default=".", help="directory relative image paths resolve against")
    ev.add_argument("--negation", action="store_true", help="skip fallback matches preceded by a negation")

    cur = sub.add_parser("curate", help="dataset curation stages")
    stages = cur.add_subparsers(dest="stage", required=True)

    rw = stages.add_parser("rewrite", parents=[client], help="build the paraphrased question pool")
    rw.add_argument("--out", required=True, help="question pool file to write")
    rw.add_argument("--seed-question", default=SEED_QUESTION)
    rw.add_argument("-k", type=int, default=100, help="number of distinct variants")
    rw.add_argument("--model", default="gpt-4o")
    rw.add_argument("--rounds", type=int, default=5, help="extra requests allowed to cover a shortfall")

    asm = stages.add_parser("assemble", parents=[labels], help="image/label pairs -> VQA records")
    asm.add_argument("pairs", help="JSONL of {image, label, dataset[, id]}")
    asm.add_argument("--pool", required=True, help="question pool file from 'curate rewrite'")
    asm.add_argument("--out", required=True)
    asm.add_argument("--seed", type=int, default=0)
    asm.add_argument("--shuffle-candidates", action="store_true")
    asm.add_argument("--skip-invalid", action="store_true",
                     help="write bad pairs to <out>.rejects.jsonl instead of failing")

    syn = stages.add_parser("synthesize", parents=[client], help="generate reasoning trajectories")
    syn.add_argument("records", help="JSONL of VQA records")
    syn.add_argument("--out", required=True)
    syn.add_argument("--model", default="gemini-2.5-flash")
    syn.add_argument("--image-root", default=".")
    syn.add_argument("--rules", default=None, help="cue table file ('label: cue; cue' per line)")

    flt = stages.add_parser("filter", parents=[labels], help="quality-control synthesized records")
    flt.add_argument("records", help="JSONL of synthesized records")
    flt.add_argument("--out", required=True, help="kept records")
    flt.add_argument("--rejected", default=None, help="also write rejected records here")
    flt.add_argument("--blur-phrases", default=None, help="file with one blur phrase per line")

    st = stages.add_parser("stats", help="label distribution and length statistics")
    st.add_argument("records", help="JSONL of VQA or synthesized records")
    st.add_argument("--out", required=True, help="JSON report path")
    st.add_argument("--length-unit", choices=("chars", "tokens"), default="chars")
    st.add_argument("--top-words", type=int, default=50, help="word-frequency entries per field (0 = off)")

    rep = sub.add_parser("report", help="leaderboard and confusion matrices from evaluation results")
    rep.add_argument("results", help="directory searched recursively for report.json")
    rep.add_argument("--format", choices=("md", "json", "csv", "svg"), default="md")
    rep.add_argument("--out", default=None, help="output directory (default: the results directory)")

    rl = sub.add_parser("rlvr", help="reward scoring and gradient verification")
    rls = rl.add_subparsers(dest="action", required=True)
    cg = rls.add_parser("check-gradients", help="finite-difference check of the analytic gradients")
    cg.add_argument("--instances", type=int, default=50)
    cg.add_argument("--seed", type=int, default=0)
    cg.add_argument("--out", default=".", help="directory for the run manifest")
    sc = rls.add_parser("score", parents=[labels], help="score (response, gt) pairs")
    sc.add_argument("pairs", help="JSONL of {response, gt[, candidates][, id]}")
    sc.add_argument("--out", required=True, help="JSONL of reward breakdowns")
    return parser


# --- helpers --------------------------------------------------------------------

def _label_config(args: argparse.Namespace) -> LabelConfig | None:
    return LabelConfig.from_file(args.label_config) if getattr(args, "label_config", None) else None


def _lexicon(args: argparse.Namespace) -> Lexicon | None:
    return Lexicon.from_file(args.lexicon) if getattr(args, "lexicon", None) else None


def _client(args: argparse.Namespace) -> ModelClient:
    cfg = ClientConfig(
        endpoint=args.endpoint,
        api_key_env=args.api_key_env or None,
        max_in_flight=args.concurrency,
        retry_budget=args.retries,
        cache_dir=args.cache_dir,
        timeout=args.timeout,
    )
    return ModelClient(cfg)


def _chunks(items: Sequence[Any], size: int) -> list[Sequence[Any]]:
    return [items[i:i + size] for i in range(0, len(items), size)]


def _config_snapshot(args: argparse.Namespace) -> dict[str, Any]:
    return {k: v for k, v in vars(args).items() if k != "handler"}


def _check_positive(parser: argparse.ArgumentParser, args: argparse.Namespace) -> None:
    for name in ("concurrency", "chunk_size", "max_output_tokens", "k", "instances"):
        value = getattr(args, name, None)
        if value is not None and value < 1:
            parser.error(f"--{name.replace('_', '-')} must be >= 1")
    for name in ("retries", "rounds", "top_words"):
        value = getattr(args, name, None)
        if value is not None and value < 0:
            parser.error(f"--{name.replace('_', '-')} must be >= 0")
    if getattr(args, "temperature", 0.0) < 0:
        parser.error("--temperature must be >= 0")


# --- evaluate -------------------------------------------------------------------

def load_manifest(path: str | Path, label_config: LabelConfig | None) -> list[VqaRecord]:
    """VQA records; rows without a question get the seed question over the dataset's label set."""
    out: list[VqaRecord] = []
    seen: set[str] = set()
    for lineno, row in iter_jsonl(path):
        try:
            row = dict(row)
            labels = label_set(row["dataset"], label_config)
            row.setdefault("candidates", [l.value for l in labels])
            row.setdefault("question", render_question(SEED_QUESTION, labels))
            rec = VqaRecord.from_dict(row)
            if rec.label not in labels:
                raise InvalidRecord(f"label {rec.label.value!r} not in the {rec.dataset.value} label set")
        except (InvalidRecord, KeyError, ValueError) as exc:
            raise InvalidRecord(f"{path}:{lineno}: {exc}") from exc
        if rec.id in seen:
            raise InvalidRecord(f"{path}:{lineno}: duplicate record id {rec.id!r}")
        seen.add(rec.id)
        out.append(rec)
    if not out:
        raise InvalidRecord(f"{path}: manifest is empty")
    return out


def run_evaluate(args: argparse.Namespace, run: RunManifest) -> None:
    out_dir = Path(args.out)
    label_config, lexicon = _label_config(args), _lexicon(args)
    records = load_manifest(args.manifest, label_config)
    load = image_loader(args.image_root)
    missing = [r.image for r in records if not _image_path(args.image_root, r.image).is_file()]
    if missing:
        raise InvalidRecord(f"{len(missing)} image(s) not found, first: {missing[0]}")
    run.inputs.append(str(args.manifest))

    client = _client(args)
    results: list[EvalRecord] = []
    cached = 0
    for chunk in _chunks(records, args.chunk_size):
        reqs = []
        for rec in chunk:
            data, media_type = load(rec.image)
            reqs.append(ChatRequest(
                model=args.model,
                system=SYSTEM_PROMPT,
                user=rec.question,
                image=data,
                media_type=media_type,
                temperature=args.temperature,
                max_output_tokens=args.max_output_tokens,
            ))
        for rec, resp in zip(chunk, client.batch_complete(reqs)):
            cached += resp.from_cache
            if resp.error is not None:
                results.append(EvalRecord(rec.id, rec.dataset, args.model, "", None, ExtractionMethod.FAILED,
                                          rec.label, error=f"{type(resp.error).__name__}: {resp.error}"))
                continue
            ex = extract_answer(resp.text, rec.candidates, lexicon, negation=args.negation)
            results.append(EvalRecord(rec.id, rec.dataset, args.model, resp.text, ex.label, ex.method, rec.label))
        log.info("evaluated %d/%d", len(results), len(records))

    report = evaluate_records(results, args.model, label_config)
    model_dir = out_dir / model_slug(args.model)
    write_jsonl(model_dir / "records.jsonl", (r.to_dict() for r in results))
    write_json(model_dir / "report.json", report.to_dict())
    run.outputs += [str(model_dir / "records.jsonl"), str(model_dir / "report.json")]
    run.counts = {
        "records": len(results),
        "cached": cached,
        "request_errors": sum(1 for r in results if r.error),
        "failed_extractions": sum(1 for r in results if r.extraction_method is ExtractionMethod.FAILED),
        "accuracy": report.accuracy,
        "macro_f1": report.macro_f1,
    }
    print(f"{args.model}: accuracy {100 * report.accuracy:.2f}  macro-F1 {100 * report.macro_f1:.2f}  "
          f"({len(results)} records)")


def _image_path(root: str, ref: str) -> Path:
    p = Path(ref)
    return p if p.is_absolute() else Path(root) / p


# --- curate ---------------------------------------------------------------------

def run_rewrite(args: argparse.Namespace, run: RunManifest) -> None:
    pool = rewrite_questions(
        args.seed_question, args.k, _client(args),
        model=args.model, retry_budget=args.rounds, temperature=args.temperature,
    )
    out = Path(args.out)
    atomic_write_text(out, pool.dump())
    run.outputs.append(str(out))
    run.counts = {"variants": len(pool.variants)}


def run_assemble(args: argparse.Namespace, run: RunManifest) -> None:
    pool = QuestionPool.load(args.pool)
    pairs = read_records(args.pairs, Pair.from_dict)
    lines = [lineno for lineno, _ in iter_jsonl(args.pairs)]
    result = assemble_rlvr(pairs, pool, args.seed, label_config=_label_config(args),
                           shuffle_candidates=args.shuffle_candidates)
    out = Path(args.out)
    run.inputs += [str(args.pairs), str(args.pool)]
    if result.errors and not args.skip_invalid:
        first = "; ".join(f"{args.pairs}:{lines[i]}: {exc}" for i, exc in result.errors[:5])
        raise InvalidRecord(f"{len(result.errors)} invalid pair(s): {first}")
    write_jsonl(out, (r.to_dict() for r in result.records))
    run.outputs.append(str(out))
    if result.errors:
        rejects = out.with_name(out.name + ".rejects.jsonl")
        write_jsonl(rejects, ({"line": lines[i], "error": str(exc)} for i, exc in result.errors))
        run.outputs.append(str(rejects))
        log.warning("%d pair(s) rejected, see %s", len(result.errors), rejects)
    run.counts = {"pairs": len(pairs), "records": len(result.records), "rejected": len(result.errors)}


def run_synthesize(args: argparse.Namespace, run: RunManifest) -> None:
    records = read_records(args.records, VqaRecord.from_dict)
    rules = RuleTable.from_file(args.rules) if args.rules else RuleTable.default()
    load = image_loader(args.image_root)
    client = _client(args)
    out_records: list[CotRecord] = []
    for chunk in _chunks(records, args.chunk_size):
        out_records += synthesize_batch(chunk, rules, client, load, model=args.model,
                                        temperature=args.temperature, max_output_tokens=args.max_output_tokens)
        log.info("synthesized %d/%d", len(out_records), len(records))
    out = Path(args.out)
    write_jsonl(out, (r.to_dict() for r in out_records))
    run.inputs.append(str(args.records))
    run.outputs.append(str(out))
    run.counts = {"records": len(out_records), "request_errors": sum(1 for r in out_records if r.error)}


def run_filter(args: argparse.Namespace, run: RunManifest) -> None:
    records = read_records(args.records, CotRecord.from_dict)
    blur = load_phrases(Path(args.blur_phrases).read_text(encoding="utf-8")) if args.blur_phrases else DEFAULT_BLUR_PHRASES
    judged, report = filter_records(records, blur, _lexicon(args))
    out = Path(args.out)
    write_jsonl(out, (r.to_dict() for r in judged if r.qc_status is QcStatus.KEPT))
    run.inputs.append(str(args.records))
    run.outputs.append(str(out))
    if args.rejected:
        write_jsonl(args.rejected, (r.to_dict() for r in judged if r.qc_status is QcStatus.REJECTED))
        run.outputs.append(str(args.rejected))
    report_path = out.with_name(out.name + ".qc.json")
    write_json(report_path, report.to_dict())
    run.outputs.append(str(report_path))
    run.counts = report.to_dict()
    print(json.dumps(report.to_dict()))


def _any_record(d: dict[str, Any]) -> VqaRecord:
    return CotRecord.from_dict(d) if "raw_output" in d else VqaRecord.from_dict(d)


def run_stats(args: argparse.Namespace, run: RunManifest) -> None:
    records = read_records(args.records, _any_record)
    stats = dataset_stats(records, args.length_unit).to_dict()
    if args.top_words:
        fields = ["question"] + (["trajectory"] if any(isinstance(r, CotRecord) for r in records) else [])
        stats["word_frequencies"] = {
            f: word_frequencies(records, f, DEFAULT_STOP_WORDS)[: args.top_words] for f in fields
        }
    out = Path(args.out)
    write_json(out, stats)
    run.inputs.append(str(args.records))
    run.outputs.append(str(out))
    run.counts = {"records": stats["total"]}


# --- report ---------------------------------------------------------------------

def run_report(args: argparse.Namespace, run: RunManifest) -> None:
    reports = load_reports(args.results)
    out_dir = Path(args.out or args.results)
    files: dict[str, str] = {}
    if args.format == "md":
        files["leaderboard.md"] = leaderboard_markdown(reports)
    elif args.format == "json":
        files["leaderboard.json"] = leaderboard_json(reports)
    else:
        for rep in reports:
            files.update(confusion_artifacts(rep, args.format))
    for name, text in files.items():
        atomic_write_text(out_dir / name, text)
        run.outputs.append(str(out_dir / name))
    if args.format in ("md", "json"):
        sys.stdout.write(next(iter(files.values())))
    run.inputs.append(str(args.results))
    run.counts = {"models": len(reports), "files": len(files)}


# --- rlvr -----------------------------------------------------------------------

def run_check_gradients(args: argparse.Namespace, run: RunManifest) -> None:
    result = check_gradients(instances=args.instances, seed=args.seed)
    print(json.dumps(result, indent=2))
    run.counts = result
    if not result["pass"]:
        raise FerkitError("gradient check failed")


def run_score(args: argparse.Namespace, run: RunManifest) -> None:
    label_config, lexicon = _label_config(args), _lexicon(args)
    rows = []
    for lineno, d in iter_jsonl(args.pairs):
        try:
            gt = EmotionLabel.parse(d["gt"])
            if "candidates" in d:
                cands = tuple(EmotionLabel.parse(c) for c in d["candidates"])
            elif "dataset" in d:
                cands = label_set(d["dataset"], label_config)
            else:
                cands = tuple(EmotionLabel)
            response = d["response"]
            if not isinstance(response, str):
                raise ValueError("response must be a string")
        except (KeyError, ValueError, TypeError) as exc:
            raise InvalidRecord(f"{args.pairs}:{lineno}: {exc}") from exc
        row = {"id": d["id"]} if "id" in d else {}
        row.update(reward(response, gt, cands, lexicon).to_dict())
        rows.append(row)
    out = Path(args.out)
    write_jsonl(out, rows)
    run.inputs.append(str(args.pairs))
    run.outputs.append(str(out))
    run.counts = {"pairs": len(rows), "total_reward": sum(r["total"] for r in rows)}


HANDLERS: dict[tuple[str, ...], Callable[[argparse.Namespace, RunManifest], None]] = {
    ("evaluate",): run_evaluate,
    ("curate", "rewrite"): run_rewrite,
    ("curate", "assemble"): run_assemble,
    ("curate", "synthesize"): run_synthesize,
    ("curate", "filter"): run_filter,
    ("curate", "stats"): run_stats,
    ("report",): run_report,
    ("rlvr", "check-gradients"): run_check_gradients,
    ("rlvr", "score"): run_score,
}


def _command_key(args: argparse.Namespace) -> tuple[str, ...]:
    second = getattr(args, "stage", None) or getattr(args, "action", None)
    return (args.command, second) if second else (args.command,)


# Commands whose --out names a directory; for the rest it names a file.
OUT_IS_DIR = {("evaluate",), ("report",), ("rlvr", "check-gradients")}


def _manifest_dir(args: argparse.Namespace, key: tuple[str, ...]) -> Path:
    out = Path(args.out) if getattr(args, "out", None) else Path(args.results)
    return out if key in OUT_IS_DIR else out.parent


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    _check_positive(parser, args)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
        stream=sys.stderr,
    )
    key = _command_key(args)
    run = RunManifest(subcommand=" ".join(key), config=_config_snapshot(args))
    status = 0
    try:
        HANDLERS[key](args, run)
        run.status = "ok"
    except (FerkitError, OSError, ValueError, json.JSONDecodeError) as exc:
        run.status, run.error = "error", f"{type(exc).__name__}: {exc}"
        print(f"ferkit: error: {exc}", file=sys.stderr)
        status = 1
    run.ended_at = _now()
    try:
        run.append_to(_manifest_dir(args, key))
    except OSError as exc:
        print(f"ferkit: error: could not write run manifest: {exc}", file=sys.stderr)
        status = 1
    return status


if __name__ == "__main__":
    sys.exit(main())
