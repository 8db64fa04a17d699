"""Command-line pipeline: gen-corpus, ingest, stats, label, train, index, query, eval, bench.

Every stage reads a TOML run config (``--config``), resolves it against the
defaults, rejects unknown keys, and writes all outputs under ``--out``.
Each artifact gets a ``<name>.meta.json`` sidecar recording the producing
command, the resolved-config hash and the seeds; the resolved config itself
is echoed to ``<command>.config.json``.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path
from typing import Optional, Sequence

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

import numpy as np

from .corpus import Corpus, CorpusError, GeneratorParams, compute_stats, generate_synthetic, ingest_jsonl, write_jsonl
from .encoders import BiEncoder, EncoderConfig, PolyEncoder, load_checkpoint
from .encoders.checkpoint import CheckpointError, atomic_write_bytes
from .evalbench import cross_domain_run, derive_queries, grid_csv, latency_bench
from .labeler import AspectPatternSet, Gazetteer, SkipReport, annotate_corpus, read_labels
from .retrieval import (
    METRICS,
    FingerprintMismatch,
    IndexFormatError,
    InvertedIndex,
    VectorIndex,
    build_vector_index,
    knn,
    lexical_terms,
    rerank,
)
from .tensor import no_grad
from .training import TrainConfig, TrainingDiverged, build_vocab, train

logger = logging.getLogger("answer_retrieval")


class CliError(Exception):
    """A user-facing failure: printed without a traceback, exit status 1."""


# ---------------------------------------------------------------------------
# run config
# ---------------------------------------------------------------------------

@dataclass
class LabelerConfig:
    gazetteer: Optional[str] = None
    patterns: Optional[str] = None


@dataclass
class RetrievalConfig:
    metric: str = "dot"
    batch_size: int = 64


@dataclass
class EvalConfig:
    mode: str = "random"
    n_candidates: int = 64
    train_tag: str = "train"
    eval_tag: str = "eval"


@dataclass
class BenchConfig:
    passage_counts: list = field(default_factory=lambda: [128, 256, 512, 1024, 2048])
    n_queries: int = 15
    warmup: int = 5
    single_precision: bool = True


# seeds are derived from the global seed, so per-section seed keys are not accepted
_SECTIONS = {
    "generator": (GeneratorParams, set()),
    "labeler": (LabelerConfig, set()),
    "encoder": (EncoderConfig, {"seed", "vocab_size"}),
    "training": (TrainConfig, {"seed"}),
    "retrieval": (RetrievalConfig, set()),
    "eval": (EvalConfig, set()),
    "bench": (BenchConfig, set()),
}


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "out"
    generator: GeneratorParams = field(default_factory=GeneratorParams)
    labeler: LabelerConfig = field(default_factory=LabelerConfig)
    encoder: EncoderConfig = field(default_factory=EncoderConfig)
    training: TrainConfig = field(default_factory=TrainConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    bench: BenchConfig = field(default_factory=BenchConfig)

    def to_dict(self) -> dict:
        out = asdict(self)
        out["generator"] = {k: list(v) if isinstance(v, tuple) else v for k, v in out["generator"].items()}
        return out

    def hash(self) -> str:
        """Digest of every setting that can change results; the output location is excluded."""
        settings = {k: v for k, v in self.to_dict().items() if k != "out"}
        return hashlib.sha256(json.dumps(settings, sort_keys=True).encode()).hexdigest()[:16]


def parse_config(data: dict, source: str = "<config>") -> RunConfig:
    """Build a :class:`RunConfig` from parsed TOML, rejecting unknown keys."""
    cfg = RunConfig()
    for key, value in data.items():
        if key in ("seed", "out"):
            setattr(cfg, key, value)
            continue
        if key not in _SECTIONS:
            raise CliError(f"{source}: unknown config key {key!r}; expected one of "
                           f"{sorted(['seed', 'out', *_SECTIONS])}")
        if not isinstance(value, dict):
            raise CliError(f"{source}: [{key}] must be a table")
        cls, forbidden = _SECTIONS[key]
        allowed = {f.name for f in fields(cls)} - forbidden
        unknown = sorted(set(value) - allowed)
        if unknown:
            raise CliError(f"{source}: unknown key(s) {unknown} in [{key}]; allowed: {sorted(allowed)}")
        try:
            setattr(cfg, key, replace(getattr(cfg, key), **value))
        except (TypeError, ValueError) as exc:
            raise CliError(f"{source}: invalid [{key}]: {exc}") from None
    if not isinstance(cfg.seed, int):
        raise CliError(f"{source}: seed must be an integer")
    return cfg


def load_config(path: Optional[str]) -> RunConfig:
    if path is None:
        return RunConfig()
    try:
        with open(path, "rb") as fh:
            data = tomllib.load(fh)
    except FileNotFoundError:
        raise CliError(f"config file {path} does not exist") from None
    except tomllib.TOMLDecodeError as exc:
        raise CliError(f"{path}: not valid TOML: {exc}") from None
    return parse_config(data, path)


def derive_seed(seed: int, stage: str) -> int:
    """Stage seed: first 4 bytes of sha256("<seed>:<stage>") as an unsigned int."""
    return int.from_bytes(hashlib.sha256(f"{seed}:{stage}".encode()).digest()[:4], "little")


# ---------------------------------------------------------------------------
# output bookkeeping
# ---------------------------------------------------------------------------

class Run:
    """Tracks one invocation's outputs so they can be annotated or rolled back."""

    def __init__(self, command: str, cfg: RunConfig, out: Path):
        self.command = command
        self.cfg = cfg
        self.out = out
        self.config_hash = cfg.hash()
        self.produced: list[Path] = []
        self._before: set[Path] = set()

    def __enter__(self) -> "Run":
        self.out.mkdir(parents=True, exist_ok=True)
        self._before = {p for p in self.out.rglob("*")}
        return self

    def __exit__(self, exc_type, exc, tb) -> bool:
        if exc_type is not None:
            # remove everything this run created; earlier outputs stay untouched
            created = sorted((p for p in self.out.rglob("*") if p not in self._before),
                             key=lambda p: len(p.parts), reverse=True)
            for p in created:
                if p.is_dir():
                    try:
                        p.rmdir()
                    except OSError:
                        pass
                else:
                    p.unlink(missing_ok=True)
            return False
        self._echo_config()
        for path in self.produced:
            self._sidecar(path)
        return False

    def meta(self, stage_seed: Optional[int] = None) -> dict:
        meta = {"command": self.command, "config_hash": self.config_hash, "seed": self.cfg.seed}
        if stage_seed is not None:
            meta["stage_seed"] = stage_seed
        return meta

    stage_seed: Optional[int] = None

    def _sidecar(self, path: Path) -> None:
        payload = json.dumps(self.meta(self.stage_seed), sort_keys=True, indent=2) + "\n"
        atomic_write_bytes(path.with_name(path.name + ".meta.json"), payload.encode())

    def _echo_config(self) -> None:
        payload = {**self.meta(self.stage_seed), "config": self.cfg.to_dict()}
        atomic_write_bytes(self.out / f"{self.command}.config.json",
                           (json.dumps(payload, sort_keys=True, indent=2) + "\n").encode())

    def write(self, name: str, data: bytes | str) -> Path:
        path = self.out / name
        path.parent.mkdir(parents=True, exist_ok=True)
        atomic_write_bytes(path, data.encode("utf-8") if isinstance(data, str) else data)
        self.produced.append(path)
        return path

    def register(self, path: Path) -> None:
        self.produced.append(Path(path))


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------

def _require(path: Optional[str], what: str, hint: str) -> Path:
    if not path:
        raise CliError(f"missing {what}; {hint}")
    p = Path(path)
    if not p.exists():
        raise CliError(f"{what} {p} does not exist; {hint}")
    return p


def _load_corpus(path: Optional[str]) -> Corpus:
    p = _require(path, "corpus file", "pass --corpus (create one with gen-corpus or ingest)")
    try:
        return ingest_jsonl(p)
    except CorpusError as exc:
        raise CliError(str(exc)) from None


def _load_labels(path: Optional[str]):
    p = _require(path, "label file", "pass --labels (create one with the label command)")
    try:
        return read_labels(p)
    except (ValueError, KeyError) as exc:
        raise CliError(f"{p}: malformed label file: {exc}") from None


def _load_model(path: Optional[str]):
    p = _require(path, "checkpoint", "pass --checkpoint (create one with the train command)")
    try:
        return load_checkpoint(p)[0]
    except (CheckpointError, OSError, ValueError, KeyError) as exc:
        raise CliError(f"{p}: cannot load checkpoint: {exc}") from None


def _gazetteer(cfg: RunConfig) -> Gazetteer:
    if cfg.labeler.gazetteer:
        return Gazetteer.load(_require(cfg.labeler.gazetteer, "gazetteer", "fix [labeler].gazetteer"))
    return Gazetteer(cfg.generator.entities)


def _patterns(cfg: RunConfig) -> AspectPatternSet:
    if cfg.labeler.patterns:
        return AspectPatternSet.load(_require(cfg.labeler.patterns, "pattern file", "fix [labeler].patterns"))
    return AspectPatternSet.default()


def _keyed_paths(items: Sequence[str], flag: str) -> dict[str, str]:
    out = {}
    for item in items or ():
        key, sep, path = item.partition("=")
        if not sep or not key or not path:
            raise CliError(f"{flag} expects ARCH=PATH, got {item!r}")
        out[key] = path
    return out


def _snippet(text: str, width: int = 60) -> str:
    return text if len(text) <= width else text[:width - 3] + "..."


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen_corpus(args, cfg: RunConfig, run: Run) -> None:
    params = cfg.generator
    if args.docs is not None:
        params = replace(params, n_docs=args.docs)
        cfg.generator = params
        run.config_hash = cfg.hash()
    run.stage_seed = derive_seed(cfg.seed, "gen-corpus")
    try:
        corpus = generate_synthetic(params, run.stage_seed)
    except CorpusError as exc:
        raise CliError(f"invalid [generator] settings: {exc}") from None
    tmp = run.out / "corpus.jsonl"
    write_jsonl(corpus, tmp)
    run.register(tmp)
    print(f"wrote {len(corpus)} documents / {len(corpus.passages)} passages to {tmp}")


def cmd_ingest(args, cfg: RunConfig, run: Run) -> None:
    src = _require(args.input, "input file", "pass --input FILE.jsonl")
    try:
        corpus = ingest_jsonl(src)
    except CorpusError as exc:
        raise CliError(str(exc)) from None
    dst = run.out / "corpus.jsonl"
    write_jsonl(corpus, dst)
    run.register(dst)
    print(f"ingested {len(corpus)} documents / {len(corpus.passages)} passages into {dst}")


def cmd_stats(args, cfg: RunConfig, run: Run) -> None:
    stats = compute_stats(_load_corpus(args.corpus))
    text = json.dumps(asdict(stats), indent=2, sort_keys=True) + "\n"
    run.write("stats.json", text)
    print(text, end="")


def cmd_label(args, cfg: RunConfig, run: Run) -> None:
    corpus = _load_corpus(args.corpus)
    report = SkipReport()
    labels = annotate_corpus(corpus, _gazetteer(cfg), _patterns(cfg), report)
    run.write("labels.jsonl", "".join(l.to_json() + "\n" for l in labels))
    run.write("label_report.json", json.dumps(asdict(report), indent=2, sort_keys=True) + "\n")
    print(f"labeled {report.kept} of {report.total} passages "
          f"(skipped: {report.no_entity} without entity, {report.no_aspect} without aspect, "
          f"{report.neither} without either)")


def cmd_train(args, cfg: RunConfig, run: Run) -> None:
    corpus = _load_corpus(args.corpus)
    labels = _load_labels(args.labels)
    tcfg = cfg.training
    if args.arch:
        tcfg = replace(tcfg, architecture=args.arch)
    if args.epochs is not None:
        tcfg = replace(tcfg, epochs=args.epochs)
    cfg.training = tcfg
    run.config_hash = cfg.hash()
    run.stage_seed = derive_seed(cfg.seed, f"train:{tcfg.architecture}")
    tcfg = replace(tcfg, seed=run.stage_seed)
    ecfg = replace(cfg.encoder, seed=derive_seed(cfg.seed, f"init:{tcfg.architecture}"))
    sub = run.out / tcfg.architecture
    try:
        result = train(corpus, labels, tcfg, ecfg, vocab=build_vocab(corpus, labels), out_dir=sub)
    except TrainingDiverged as exc:
        raise CliError(f"training diverged: {exc}; try a lower [training].learning_rate") from None
    except ValueError as exc:
        raise CliError(f"cannot train: {exc}") from None
    for name in ("model.npz", "loss_trace.csv", "train_config.json"):
        run.register(sub / name)
    print(f"trained {tcfg.architecture} for {len(result.trace)} epochs; final loss {result.final_loss:.6f}; "
          f"checkpoint {result.checkpoint}")


def cmd_index(args, cfg: RunConfig, run: Run) -> None:
    corpus = _load_corpus(args.corpus)
    model = _load_model(args.checkpoint)
    if not isinstance(model, BiEncoder) or isinstance(model, PolyEncoder):
        raise CliError(f"index needs a Bi-encoder checkpoint, got {model.arch!r} "
                       "(Poly/Cross/CDV score candidates at query time)")
    metric = args.metric or cfg.retrieval.metric
    if metric not in METRICS:
        raise CliError(f"unknown metric {metric!r}; choose from {METRICS}")
    index = build_vector_index(corpus.passages, model, metric, cfg.retrieval.batch_size)
    path = run.write("index.bin", index.to_bytes())
    print(f"indexed {len(index)} passages (dim {index.dim}, {metric}) into {path}")


def cmd_query(args, cfg: RunConfig, run: Run) -> None:
    corpus = _load_corpus(args.corpus)
    query = (args.entity, args.aspect)
    if not args.entity.strip() or not args.aspect.strip():
        raise CliError("--entity and --aspect must be non-empty")
    if args.arch in ("bm25", "tfidf"):
        ranked = InvertedIndex.from_passages(corpus.passages).search(
            lexical_terms(f"{args.entity} {args.aspect}"), args.k, args.arch)
    else:
        model = _load_model(args.checkpoint)
        if args.arch and args.arch != model.arch:
            raise CliError(f"--arch {args.arch} does not match checkpoint architecture {model.arch}")
        if args.index:
            try:
                index = VectorIndex.load(_require(args.index, "index file", "build one with the index command"))
            except IndexFormatError as exc:
                raise CliError(f"{args.index}: {exc}") from None
            if index.fingerprint != model.fingerprint():
                raise CliError(f"index {args.index} was built with different weights; rebuild it")
            with no_grad():
                ranked = knn(index, model.encode_queries([query]).data[0], args.k)
        else:
            ranked = rerank(corpus.passages, query, model).top(args.k)
    rows = [("rank", "score", "doc id", "heading", "snippet")]
    for i, (pid, score) in enumerate(ranked, 1):
        p = corpus.passage(pid)
        rows.append((str(i), f"{score:.4f}", p.doc_id, p.heading or "-", _snippet(p.text)))
    widths = [max(len(r[c]) for r in rows) for c in range(4)]
    for r in rows:
        print("  ".join(r[c].ljust(widths[c]) for c in range(4)) + "  " + r[4])


def cmd_eval(args, cfg: RunConfig, run: Run) -> None:
    ec = cfg.eval
    mode = args.mode or ec.mode
    eval_sets = {}
    specs = list(args.eval_set or [])
    if args.corpus or args.labels:
        specs.insert(0, f"{ec.eval_tag}={args.corpus}:{args.labels}")
    if not specs:
        raise CliError("nothing to evaluate; pass --corpus and --labels or --eval-set TAG=CORPUS:LABELS")
    for spec in specs:
        tag, sep, rest = spec.partition("=")
        corpus_path, sep2, labels_path = rest.partition(":")
        if not sep or not sep2:
            raise CliError(f"--eval-set expects TAG=CORPUS:LABELS, got {spec!r}")
        corpus = _load_corpus(corpus_path)
        eval_sets[tag] = (corpus, derive_queries(_load_labels(labels_path)))
    checkpoints = {(ec.train_tag, arch): path for arch, path in _keyed_paths(args.checkpoint, "--checkpoint").items()}
    for item in args.model or ():
        parts = item.split("=", 1)
        tag_arch = parts[0].split(":")
        if len(parts) != 2 or len(tag_arch) != 2:
            raise CliError(f"--model expects TRAIN_TAG:ARCH=PATH, got {item!r}")
        checkpoints[tuple(tag_arch)] = parts[1]
    train_tags = sorted({t for t, _ in checkpoints} or {ec.train_tag})
    archs = sorted({a for _, a in checkpoints}) + list(args.baselines or [])
    if not archs:
        raise CliError("no models to evaluate; pass --checkpoint ARCH=PATH or --baselines bm25 tfidf")
    for key, path in checkpoints.items():
        _require(path, "checkpoint", f"check the path given for {key[1]}")
    run.stage_seed = derive_seed(cfg.seed, "eval")
    rows = cross_domain_run(checkpoints, eval_sets, train_tags, archs, mode, ec.n_candidates, run.stage_seed)
    text = grid_csv(rows)
    run.write("eval.csv", text)
    print(text, end="")


def cmd_bench(args, cfg: RunConfig, run: Run) -> None:
    bc = cfg.bench
    corpus = _load_corpus(args.corpus)
    models = {arch: _load_model(path) for arch, path in _keyed_paths(args.checkpoint, "--checkpoint").items()}
    if not models:
        raise CliError("no models to benchmark; pass --checkpoint ARCH=PATH (repeatable)")
    counts = args.counts or bc.passage_counts
    if max(counts) > len(corpus.passages):
        raise CliError(f"largest passage count {max(counts)} exceeds the corpus ({len(corpus.passages)} passages)")
    run.stage_seed = derive_seed(cfg.seed, "bench")
    labels = annotate_corpus(corpus, _gazetteer(cfg), _patterns(cfg))
    queries = [q.query for q in derive_queries(labels)]
    if not queries:
        raise CliError("corpus yields no (entity, aspect) queries to time")
    rng = np.random.default_rng(run.stage_seed)
    picks = rng.choice(len(queries), size=bc.n_queries, replace=len(queries) < bc.n_queries)
    report = latency_bench(models, corpus.passages, [queries[int(i)] for i in picks], counts, bc.warmup,
                           bc.single_precision)
    text = report.to_csv()
    run.write("latency.csv", text)
    print(text, end="")


COMMANDS = {
    "gen-corpus": cmd_gen_corpus, "ingest": cmd_ingest, "stats": cmd_stats, "label": cmd_label,
    "train": cmd_train, "index": cmd_index, "query": cmd_query, "eval": cmd_eval, "bench": cmd_bench,
}


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML run config")
    common.add_argument("--seed", type=int, help="global seed (overrides the config)")
    common.add_argument("--out", help="output directory (overrides the config)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="answer-retrieval", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", parents=[common], help="generate a synthetic heading-structured corpus")
    p.add_argument("--docs", type=int, help="number of documents (overrides [generator].n_docs)")

    p = sub.add_parser("ingest", parents=[common], help="validate and normalize a JSONL corpus")
    p.add_argument("--input", required=True)

    p = sub.add_parser("stats", parents=[common], help="corpus statistics")
    p.add_argument("--corpus", required=True)

    p = sub.add_parser("label", parents=[common], help="derive (entity, aspect) labels per passage")
    p.add_argument("--corpus", required=True)

    p = sub.add_parser("train", parents=[common], help="train one matcher architecture")
    p.add_argument("--corpus", required=True)
    p.add_argument("--labels", required=True)
    p.add_argument("--arch", choices=["bi", "bi-shared", "poly", "cross", "cdv"])
    p.add_argument("--epochs", type=int)

    p = sub.add_parser("index", parents=[common], help="precompute Bi-encoder passage vectors")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--metric", choices=list(METRICS))

    p = sub.add_parser("query", parents=[common], help="rank passages for one (entity, aspect) query")
    p.add_argument("--corpus", required=True)
    p.add_argument("--entity", required=True)
    p.add_argument("--aspect", required=True)
    p.add_argument("--arch", choices=["bi", "bi-shared", "poly", "cross", "cdv", "bm25", "tfidf"])
    p.add_argument("--checkpoint")
    p.add_argument("--index", help="vector index for Bi-encoders (otherwise passages are encoded on the fly)")
    p.add_argument("--k", type=int, default=5)

    p = sub.add_parser("eval", parents=[common], help="Recall@1/5 under candidate re-ranking")
    p.add_argument("--corpus")
    p.add_argument("--labels")
    p.add_argument("--eval-set", action="append", metavar="TAG=CORPUS:LABELS")
    p.add_argument("--checkpoint", action="append", metavar="ARCH=PATH")
    p.add_argument("--model", action="append", metavar="TRAIN_TAG:ARCH=PATH")
    p.add_argument("--baselines", nargs="*", choices=["bm25", "tfidf"])
    p.add_argument("--mode", choices=["random", "bm25", "all"])

    p = sub.add_parser("bench", parents=[common], help="per-query latency versus corpus size")
    p.add_argument("--corpus", required=True)
    p.add_argument("--checkpoint", action="append", metavar="ARCH=PATH")
    p.add_argument("--counts", type=int, nargs="+")
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out = args.out
        with Run(args.command, cfg, Path(cfg.out)) as run:
            COMMANDS[args.command](args, cfg, run)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (FingerprintMismatch, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
