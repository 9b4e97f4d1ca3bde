"""Command-line entry point.

Commands: gen-corpus, train-retriever, build-index, train-reader, link, eval,
sweep-threshold, gradcheck.  Every flag has a config-file equivalent (a flat
"key = value" file; flags override it), and the effective configuration is
echoed as a manifest next to every output.  Exit codes: 0 success, 1
validation error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from dataclasses import dataclass
from typing import Callable, Sequence

from . import evalkit, gradcheck, kbstore, linker, neural, pipeline, reader, retriever, synthgen, textcore
from .kbstore import CorpusFormatError
from .neural import CheckpointError, ModelConfig
from .pipeline import PipelineConfig


class UsageError(ValueError):
    """Bad command line or config file; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    # argparse exits with code 2 on bad flags; the contract here is 1.
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _parse_bool(text: str) -> bool:
    low = str(text).strip().lower()
    if low in ("true", "1", "yes", "on"):
        return True
    if low in ("false", "0", "no", "off"):
        return False
    raise UsageError(f"expected a boolean, got {text!r}")


@dataclass(frozen=True)
class Opt:
    name: str  # flag name without leading dashes, e.g. "window-length"
    type: Callable
    default: object = None
    required: bool = False
    help: str = ""
    choices: tuple | None = None

    @property
    def dest(self) -> str:
        return self.name.replace("-", "_")


COMMON = [
    Opt("config", str, help="flat key=value config file; flags override it"),
    Opt("seed", int, default=0, help="run seed"),
    Opt("threads", int, help="worker count (default: ENTQA_THREADS or all cores)"),
]

MODEL_OPTS = [
    Opt("d", int, default=64, help="encoder width"),
    Opt("max-input-len", int, default=192, help="encoder maximum input length"),
    Opt("window-length", int, default=32, help="passage window length L"),
    Opt("stride", int, default=16, help="passage stride S"),
    Opt("topic-mode", str, default="first_token", choices=textcore.TOPIC_MODES),
    Opt("min-freq", int, default=1, help="vocabulary frequency threshold"),
]

COMMANDS: dict[str, dict] = {
    "gen-corpus": {
        "help": "generate a synthetic KB plus train/validation documents",
        "opts": [
            Opt("out", str, required=True, help="output directory"),
            Opt("n-entities", int, default=1000),
            Opt("vocab-size", int, default=4000),
            Opt("aliases-per-entity", int, default=2),
            Opt("ambiguity-rate", float, default=0.1),
            Opt("mentions-per-doc", int, default=5),
            Opt("n-docs", int, default=50),
            Opt("doc-len-min", int, default=40),
            Opt("doc-len-max", int, default=80),
            Opt("n-categories", int, default=10),
            Opt("surround-lo", int, default=2),
            Opt("surround-hi", int, default=4),
            Opt("val-docs", int, help="validation documents (default n_docs/4)"),
        ],
    },
    "train-retriever": {
        "help": "train the dual-encoder retriever with multi-label NCE",
        "opts": MODEL_OPTS
        + [
            Opt("kb", str, required=True),
            Opt("docs", str, required=True),
            Opt("val-docs-path", str, help="held-out documents for per-epoch recall"),
            Opt("out", str, required=True, help="checkpoint path"),
            Opt("epochs", int, default=4),
            Opt("lr", float, default=5e-3),
            Opt("batch-size", int, default=4),
            Opt("n-neg", int, default=64),
            Opt("hard-negatives", _parse_bool, default=True),
            Opt("variant", str, default="multilabel", choices=retriever.NCE_VARIANTS),
            Opt("eval-k", int, default=64),
        ],
    },
    "build-index": {
        "help": "precompute entity embeddings for exact top-K retrieval",
        "opts": [
            Opt("ckpt", str, required=True),
            Opt("kb", str, required=True),
            Opt("out", str, required=True),
        ],
    },
    "train-reader": {
        "help": "train the joint reader on frozen-retriever candidates",
        "opts": [
            Opt("ckpt-retriever", str, required=True),
            Opt("index", str, required=True),
            Opt("kb", str, required=True),
            Opt("docs", str, required=True),
            Opt("out", str, required=True, help="checkpoint path"),
            Opt("d", int, help="reader encoder width (default: retriever d)"),
            Opt("epochs", int, default=4),
            Opt("lr", float, default=5e-3),
            Opt("batch-size", int, default=1),
            Opt("k-train", int, default=64),
            Opt("variant", str, default="sumlog", choices=reader.READER_VARIANTS),
            Opt("gate-span-terms", _parse_bool, default=False),
            Opt("gold-passages-only", _parse_bool, default=True,
                help="train only on passages that contain gold mentions"),
            Opt("val-docs-path", str, help="held-out documents for epoch selection"),
        ],
    },
    "link": {
        "help": "end-to-end inference: retrieve, read, threshold, merge",
        "opts": [
            Opt("ckpt-retriever", str, required=True),
            Opt("ckpt-reader", str, required=True),
            Opt("index", str, required=True),
            Opt("kb", str, required=True),
            Opt("docs", str, required=True),
            Opt("out", str, required=True, help="predictions path"),
            Opt("k", int, default=linker.DEFAULT_K),
            Opt("p", int, default=linker.DEFAULT_P),
            Opt("gamma", float, default=linker.DEFAULT_GAMMA),
            Opt("max-mention-len", int, default=reader.DEFAULT_MAX_MENTION_LEN),
            Opt("one-entity-per-span", _parse_bool, default=True),
            Opt("oracle-candidates", _parse_bool, default=False,
                help="use gold entities as the only candidates (diagnostic)"),
        ],
    },
    "eval": {
        "help": "score a predictions file against gold annotations",
        "opts": [
            Opt("pred", str, required=True),
            Opt("docs", str, required=True),
            Opt("md-only", _parse_bool, default=False,
                help="match on spans only, ignoring entities"),
            Opt("ed-level", str, choices=("passage", "document"),
                help="also report entity-decision F1 at this level"),
            Opt("window-length", int, default=32),
            Opt("stride", int, default=16),
            Opt("report", str, help="also write metric records to this path"),
        ],
    },
    "sweep-threshold": {
        "help": "calibrate the inference threshold on a validation split",
        "opts": [
            Opt("ckpt-retriever", str, required=True),
            Opt("ckpt-reader", str, required=True),
            Opt("index", str, required=True),
            Opt("kb", str, required=True),
            Opt("docs", str, required=True),
            Opt("out", str, required=True, help="threshold/F1 curve path"),
            Opt("k", int, default=linker.DEFAULT_K),
            Opt("p", int, default=linker.DEFAULT_P),
            Opt("max-mention-len", int, default=reader.DEFAULT_MAX_MENTION_LEN),
            Opt("one-entity-per-span", _parse_bool, default=True),
        ],
    },
    "gradcheck": {
        "help": "verify analytic gradients against finite differences",
        "opts": [
            Opt("d", int, default=8),
            Opt("vocab-size", int, default=50),
            Opt("n-blocks", int, default=1),
            Opt("step", float, default=1e-4),
            Opt("tolerance", float, default=1e-3),
            Opt("sample-fraction", float, default=0.01),
        ],
    },
}


def parse_config_file(path: str) -> dict[str, str]:
    """Flat "key = value" lines; '#' starts a comment; keys mirror flag names."""
    values: dict[str, str] = {}
    try:
        fh = open(path, "r", encoding="utf-8")
    except OSError as exc:
        raise UsageError(f"cannot read config file {path}: {exc}") from exc
    with fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected 'key = value', got {raw.rstrip()!r}")
            key, value = line.split("=", 1)
            values[key.strip().replace("_", "-")] = value.strip()
    return values


def _resolve(command: str, argv: Sequence[str]) -> dict:
    opts = COMMON + COMMANDS[command]["opts"]
    parser = _Parser(prog=f"entlink {command}", description=COMMANDS[command]["help"])
    for o in opts:
        parser.add_argument(f"--{o.name}", dest=o.dest, type=str, default=None, help=o.help)
    ns = parser.parse_args(list(argv))
    by_name = {o.name: o for o in opts}
    file_values = {}
    if ns.config:
        file_values = parse_config_file(ns.config)
        unknown = set(file_values) - set(by_name)
        if unknown:
            raise UsageError(
                f"unknown config keys for {command}: {', '.join(sorted(unknown))}"
            )
    eff: dict = {}
    for o in opts:
        raw = getattr(ns, o.dest)
        if raw is None and o.name in file_values:
            raw = file_values[o.name]
        if raw is None:
            eff[o.dest] = o.default
            continue
        try:
            value = o.type(raw)
        except UsageError:
            raise
        except (TypeError, ValueError) as exc:
            raise UsageError(f"--{o.name}: invalid value {raw!r}") from exc
        if o.choices and value not in o.choices:
            raise UsageError(f"--{o.name}: {value!r} not in {o.choices}")
        eff[o.dest] = value
    missing = [o.name for o in opts if o.required and eff[o.dest] is None]
    if missing:
        raise UsageError(
            f"entlink {command}: missing required flags: "
            + ", ".join(f"--{m}" for m in missing)
        )
    return eff


def resolve_threads(eff: dict) -> int:
    if eff.get("threads"):
        return max(1, int(eff["threads"]))
    env = os.environ.get("ENTQA_THREADS")
    if env:
        try:
            return max(1, int(env))
        except ValueError as exc:
            raise UsageError(f"ENTQA_THREADS must be an integer, got {env!r}") from exc
    return os.cpu_count() or 1


def write_manifest(out_path: str, command: str, eff: dict) -> str:
    """Echo the effective configuration next to the output it produced."""
    if os.path.isdir(out_path):
        path = os.path.join(out_path, "manifest.txt")
    else:
        path = out_path + ".manifest"
    lines = [f"command = {command}"]
    for key in sorted(eff):
        if key == "config":
            continue
        value = eff[key]
        if value is None:
            continue
        lines.append(f"{key.replace('_', '-')} = {value}")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines) + "\n")
    return path


# ---------------------------------------------------------------------------
# Command implementations
# ---------------------------------------------------------------------------


def _pcfg_from(eff: dict) -> PipelineConfig:
    return PipelineConfig(
        window_len=eff["window_length"],
        stride=eff["stride"],
        topic_mode=eff["topic_mode"],
        max_input_len=eff["max_input_len"],
        min_freq=eff["min_freq"],
    )


def _pcfg_from_meta(meta: dict) -> PipelineConfig:
    return PipelineConfig(**meta["pipeline"])


def _vocab_from_meta(meta: dict) -> textcore.Vocab:
    tokens = meta["vocab"]
    return textcore.Vocab(
        token_to_id={t: i for i, t in enumerate(tokens)},
        id_to_token=tuple(tokens),
        min_freq=meta.get("min_freq", 1),
    )


def _meta_for(vocab: textcore.Vocab, pcfg: PipelineConfig) -> dict:
    return {
        "vocab": list(vocab.id_to_token),
        "min_freq": vocab.min_freq,
        "pipeline": {
            "window_len": pcfg.window_len,
            "stride": pcfg.stride,
            "topic_mode": pcfg.topic_mode,
            "max_input_len": pcfg.max_input_len,
            "t_max": pcfg.t_max,
            "min_freq": pcfg.min_freq,
        },
    }


def cmd_gen_corpus(eff: dict) -> int:
    cfg = synthgen.GenConfig(
        n_entities=eff["n_entities"],
        vocab_size=eff["vocab_size"],
        aliases_per_entity=eff["aliases_per_entity"],
        ambiguity_rate=eff["ambiguity_rate"],
        mentions_per_doc=eff["mentions_per_doc"],
        n_docs=eff["n_docs"],
        doc_len_min=eff["doc_len_min"],
        doc_len_max=eff["doc_len_max"],
        seed=eff["seed"],
        n_categories=eff["n_categories"],
        surround_lo=eff["surround_lo"],
        surround_hi=eff["surround_hi"],
    )
    out = eff["out"]
    os.makedirs(out, exist_ok=True)
    kb = synthgen.generate_kb(cfg)
    train_docs = synthgen.generate_documents(kb, cfg)
    val_docs = synthgen.generate_validation_documents(kb, cfg, eff.get("val_docs"))
    synthgen.write_kb(os.path.join(out, "kb.jsonl"), kb)
    synthgen.write_documents(os.path.join(out, "docs.train.jsonl"), train_docs)
    synthgen.write_documents(os.path.join(out, "docs.val.jsonl"), val_docs)
    write_manifest(out, "gen-corpus", eff)
    print(
        f"gen-corpus: {len(kb)} entities, {len(train_docs)} train docs, "
        f"{len(val_docs)} val docs -> {out}"
    )
    return 0


def cmd_train_retriever(eff: dict) -> int:
    pcfg = _pcfg_from(eff)
    kb, docs = kbstore.load_corpus(eff["kb"], eff["docs"], t_max=pcfg.t_max)
    bundle = pipeline.prepare_corpus(kb, docs, pcfg)
    val_bundle = None
    if eff.get("val_docs_path"):
        val_docs = kbstore.load_documents(eff["val_docs_path"], kb, t_max=pcfg.t_max)
        val_bundle = pipeline.prepare_corpus(kb, val_docs, pcfg, vocab=bundle.vocab)
    mcfg = ModelConfig(
        d=eff["d"], max_len=pcfg.max_input_len, vocab_size=len(bundle.vocab), seed=eff["seed"]
    )
    params = neural.init_params(mcfg)
    tcfg = retriever.RetrieverTrainConfig(
        epochs=eff["epochs"],
        lr=eff["lr"],
        batch_size=eff["batch_size"],
        n_neg=eff["n_neg"],
        hard_negatives=eff["hard_negatives"],
        variant=eff["variant"],
        eval_k=eff["eval_k"],
        seed=eff["seed"],
    )
    out = eff["out"]
    params, log = retriever.train_retriever(
        params, bundle, tcfg, val_bundle=val_bundle, diverged_path=out + ".diverged"
    )
    neural.checkpoint_save(out, params, meta=_meta_for(bundle.vocab, pcfg))
    with open(out + ".log.jsonl", "w", encoding="utf-8") as fh:
        for entry in log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    write_manifest(out, "train-retriever", eff)
    for entry in log:
        print(f"train-retriever: {json.dumps(entry, sort_keys=True)}")
    return 0


def cmd_build_index(eff: dict) -> int:
    bundle_ckpt = neural.checkpoint_load(eff["ckpt"])
    vocab = _vocab_from_meta(bundle_ckpt.meta)
    pcfg = _pcfg_from_meta(bundle_ckpt.meta)
    kb = kbstore.load_kb(eff["kb"])
    corpus = pipeline.prepare_corpus(kb, [], pcfg, vocab=vocab)
    index = retriever.build_index(
        bundle_ckpt.params, corpus.entity_inputs, threads=resolve_threads(eff)
    )
    retriever.save_index(eff["out"], index)
    write_manifest(eff["out"], "build-index", eff)
    print(f"build-index: {len(index)} entities (d={bundle_ckpt.params.config.d}) -> {eff['out']}")
    return 0


def _load_linking_stack(eff: dict):
    ckpt_r = neural.checkpoint_load(eff["ckpt_retriever"])
    ckpt_h = neural.checkpoint_load(eff["ckpt_reader"])
    if ckpt_r.meta.get("vocab") != ckpt_h.meta.get("vocab"):
        raise UsageError("retriever and reader checkpoints carry different vocabularies")
    index = retriever.load_index(eff["index"])
    linker.check_index(ckpt_r.params, index)
    vocab = _vocab_from_meta(ckpt_r.meta)
    pcfg = _pcfg_from_meta(ckpt_r.meta)
    kb, docs = kbstore.load_corpus(eff["kb"], eff["docs"], t_max=pcfg.t_max)
    bundle = pipeline.prepare_corpus(kb, docs, pcfg, vocab=vocab)
    return ckpt_r.params, ckpt_h.params, index, bundle


def cmd_train_reader(eff: dict) -> int:
    ckpt_r = neural.checkpoint_load(eff["ckpt_retriever"])
    index = retriever.load_index(eff["index"])
    linker.check_index(ckpt_r.params, index)
    vocab = _vocab_from_meta(ckpt_r.meta)
    pcfg = _pcfg_from_meta(ckpt_r.meta)
    kb, docs = kbstore.load_corpus(eff["kb"], eff["docs"], t_max=pcfg.t_max)
    bundle = pipeline.prepare_corpus(kb, docs, pcfg, vocab=vocab)
    # The reader is its own model, freshly initialized; the retriever
    # checkpoint only supplies the candidate slates (via the index).
    d = eff["d"] if eff.get("d") else ckpt_r.params.config.d
    mcfg = ModelConfig(
        d=d, max_len=pcfg.max_input_len, vocab_size=len(vocab), seed=eff["seed"]
    )
    params = neural.init_params(mcfg)
    tcfg = reader.ReaderTrainConfig(
        epochs=eff["epochs"],
        lr=eff["lr"],
        batch_size=eff["batch_size"],
        k_train=eff["k_train"],
        variant=eff["variant"],
        gate_span_terms=eff["gate_span_terms"],
        gold_passages_only=eff["gold_passages_only"],
        seed=eff["seed"],
    )
    val_bundle = None
    if eff.get("val_docs_path"):
        val_docs = kbstore.load_documents(eff["val_docs_path"], kb, t_max=pcfg.t_max)
        val_bundle = pipeline.prepare_corpus(kb, val_docs, pcfg, vocab=vocab)
    out = eff["out"]
    params, log = reader.train_reader(
        params, bundle, tcfg, index, retriever_params=ckpt_r.params,
        val_bundle=val_bundle, diverged_path=out + ".diverged"
    )
    neural.checkpoint_save(out, params, meta=_meta_for(vocab, pcfg))
    with open(out + ".log.jsonl", "w", encoding="utf-8") as fh:
        for entry in log:
            fh.write(json.dumps(entry, sort_keys=True) + "\n")
    write_manifest(out, "train-reader", eff)
    for entry in log:
        print(f"train-reader: {json.dumps(entry, sort_keys=True)}")
    return 0


def cmd_link(eff: dict) -> int:
    params_r, params_h, index, bundle = _load_linking_stack(eff)
    icfg = linker.InferenceConfig(
        k=eff["k"],
        p=eff["p"],
        gamma=eff["gamma"],
        max_mention_len=eff["max_mention_len"],
        one_entity_per_span=eff["one_entity_per_span"],
    )
    predictions, _ = linker.link_corpus(
        params_r,
        params_h,
        index,
        bundle,
        icfg,
        oracle_candidates=eff["oracle_candidates"],
        threads=resolve_threads(eff),
    )
    kbstore.write_predictions(eff["out"], predictions)
    write_manifest(eff["out"], "link", eff)
    n = sum(len(m) for _, m in predictions)
    print(f"link: {n} mentions over {len(predictions)} documents -> {eff['out']}")
    return 0


def cmd_eval(eff: dict) -> int:
    docs = kbstore.load_documents(eff["docs"], kb=None)
    preds = kbstore.read_predictions(eff["pred"])
    pred_by_doc = {doc_id: mentions for doc_id, mentions in preds}
    gold = {d.id: set() for d in docs}
    doc_views: dict[str, list[kbstore.TokenMention]] = {}
    for d in docs:
        tm = kbstore.gold_token_mentions(d)
        doc_views[d.id] = tm
        gold[d.id] = {(m.doc_start, m.doc_end, m.entity_id) for m in tm}
    pred_triples = {
        doc_id: {(m.doc_start, m.doc_end, m.entity_id) for m in mentions}
        for doc_id, mentions in pred_by_doc.items()
    }
    mode = "md_only" if eff["md_only"] else "full"
    records = []
    metrics = evalkit.micro_f1(pred_triples, gold, mode=mode)
    records.append({"metric": f"micro_f1[{mode}]", **metrics})
    if eff.get("ed_level"):
        level = eff["ed_level"]
        # Chunk each doc to align predictions and gold at the requested level.
        # A candidate counts as accepted in a passage iff one of its predicted
        # mentions lies fully inside the window (symmetric with the gold view).
        pairs = []
        for d in docs:
            toks, _ = textcore.tokenize(d.text)
            passages = textcore.chunk_document(
                d.id,
                list(range(len(toks))),
                eff["window_length"],
                eff["stride"],
                topic_mode="none",
            )
            views = kbstore.gold_view(doc_views[d.id], passages)
            mentions = pred_by_doc.get(d.id, [])
            if level == "passage":
                for p, pg in zip(passages, views):
                    accepted = {
                        m.entity_id
                        for m in mentions
                        if m.doc_start >= p.window_start and m.doc_end <= p.window_end
                    }
                    pairs.append((accepted, set(pg.entities)))
            else:
                accepted = {m.entity_id for m in mentions}
                gold_ids = {m.entity_id for m in doc_views[d.id]}
                pairs.append((accepted, gold_ids))
        ed = evalkit.ed_f1(pairs)
        records.append({"metric": f"ed_f1[{level}]", **ed})
    print(evalkit.render_table(records))
    if eff.get("report"):
        evalkit.write_report(eff["report"], records)
    return 0


def cmd_sweep_threshold(eff: dict) -> int:
    params_r, params_h, index, bundle = _load_linking_stack(eff)
    icfg = linker.InferenceConfig(
        k=eff["k"],
        p=eff["p"],
        gamma=0.0,
        max_mention_len=eff["max_mention_len"],
        one_entity_per_span=eff["one_entity_per_span"],
    )
    predictions, _ = linker.link_corpus(
        params_r, params_h, index, bundle, icfg, threads=resolve_threads(eff)
    )
    gold = bundle.gold_triples()
    best_gamma, curve = linker.calibrate_threshold(predictions, gold)
    with open(eff["out"], "w", encoding="utf-8") as fh:
        for gamma, f1 in curve:
            fh.write(json.dumps({"gamma": gamma, "f1": f1}) + "\n")
    write_manifest(eff["out"], "sweep-threshold", eff)
    best_f1 = max(f1 for _, f1 in curve)
    print(f"sweep-threshold: best gamma = {best_gamma!r} with F1 = {best_f1:.4f} "
          f"({len(curve)} effective thresholds) -> {eff['out']}")
    return 0


def cmd_gradcheck(eff: dict) -> int:
    reports = gradcheck.run_all(
        d=eff["d"],
        vocab_size=eff["vocab_size"],
        seed=eff["seed"],
        step=eff["step"],
        tolerance=eff["tolerance"],
        sample_fraction=eff["sample_fraction"],
        n_blocks=eff["n_blocks"],
    )
    all_ok = True
    for name, report in reports:
        print(f"gradcheck {name}: {report.summary()}")
        all_ok &= report.passed
    return 0 if all_ok else 2


HANDLERS = {
    "gen-corpus": cmd_gen_corpus,
    "train-retriever": cmd_train_retriever,
    "build-index": cmd_build_index,
    "train-reader": cmd_train_reader,
    "link": cmd_link,
    "eval": cmd_eval,
    "sweep-threshold": cmd_sweep_threshold,
    "gradcheck": cmd_gradcheck,
}


def dispatch(argv: Sequence[str]) -> int:
    """Run one command; returns the process exit code."""
    try:
        if not argv or argv[0] in ("-h", "--help"):
            print(_usage())
            return 0
        command = argv[0]
        if command not in COMMANDS:
            raise UsageError(f"unknown command {command!r}\n{_usage()}")
        eff = _resolve(command, argv[1:])
        return HANDLERS[command](eff)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (CorpusFormatError, CheckpointError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # runtime failure
        print(f"failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2


def _usage() -> str:
    lines = ["usage: entlink COMMAND [flags]", "", "commands:"]
    for name, spec in COMMANDS.items():
        lines.append(f"  {name:18s} {spec['help']}")
    lines.append("")
    lines.append("run 'entlink COMMAND --help' for per-command flags")
    return "\n".join(lines)


def main() -> None:
    sys.exit(dispatch(sys.argv[1:]))


if __name__ == "__main__":
    main()
