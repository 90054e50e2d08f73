"""Command-line entry point: ``occcot {gen-data,run,eval,report,loss-selftest}``.

Exit status is 0 on success, 1 on runtime failure and 2 on a configuration error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path
from typing import Any, Mapping, Sequence

import yaml

from . import __version__
from .backends import HttpChatBackend, MockExpert, load_fixture
from .dataset import (
    CorpusConfig,
    FILE_NAMES,
    dumps_line,
    generate_corpus,
    read_corpus,
    read_jsonl,
    samples_from,
    scripted_backend,
    write_corpus,
    write_jsonl,
)
from .evaluation import ScoreReport, load_table1, render_report, score_runs
from .losses import MpoHyper, MpoWeights, StagedWeights
from .pipeline import (
    PipelineConfig,
    PipelineRun,
    QuestionTemplates,
    StageFailure,
    probe_config,
    run_batch,
)
from .selftest import run_selftest

log = logging.getLogger("occcot")


class ConfigError(ValueError):
    pass


@dataclass
class RunConfig:
    backend: str = "mock"
    fixture_path: str | None = None
    base_url: str | None = None
    endpoint_path: str = "/v1/chat/completions"
    model_name: str = "occ-mllm"
    timeout_s: float = 30.0
    mock_error_rate: float = 0.1
    expert: str = "mock"
    expert_failure_rate: float = 0.0
    expert_failure_policy: str = "degrade"
    workers: int = 8
    templates: dict[str, str] = field(default_factory=lambda: asdict(QuestionTemplates()))
    clarity_threshold: float = 0.5
    geometry_fraction: float = 0.0
    beta: float = 0.1
    delta: float = 0.0
    quality_arg: str = "log_ratio"
    w_p: float = 1.0
    w_q: float = 1.0
    w_g: float = 1.0
    alpha_r: float = 1.0
    alpha_l: float = 1.0
    alpha_t: float = 1.0
    lambda_sr: float = 1.0
    lambda_fd: float = 1.0
    seed: int = 0

    @classmethod
    def from_mapping(cls, data: Mapping[str, Any]) -> "RunConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        cfg = cls(**dict(data))
        cfg.validate()
        return cfg

    def validate(self) -> None:
        try:
            if self.backend not in ("mock", "fixture", "http"):
                raise ValueError(f"backend must be mock, fixture or http, got {self.backend!r}")
            if self.backend == "fixture" and not self.fixture_path:
                raise ValueError("fixture backend needs fixture_path")
            if self.backend == "http" and not self.base_url:
                raise ValueError("http backend needs base_url")
            if self.expert not in ("mock", "none"):
                raise ValueError(f"expert must be mock or none, got {self.expert!r}")
            if not 0.0 <= self.mock_error_rate <= 1.0:
                raise ValueError("mock_error_rate must lie in [0, 1]")
            if not 0.0 <= self.clarity_threshold <= 1.0:
                raise ValueError("clarity_threshold must lie in [0, 1]")
            if self.timeout_s <= 0:
                raise ValueError("timeout_s must be positive")
            unknown = set(self.templates) - {f.name for f in fields(QuestionTemplates)}
            if unknown:
                raise ValueError(f"unknown template keys: {sorted(unknown)}")
            self.pipeline_config()
            self.mpo()
            self.staged_weights()
            self.corpus_config()
        except (ValueError, TypeError) as exc:
            raise ConfigError(str(exc)) from None

    def pipeline_config(self) -> PipelineConfig:
        return PipelineConfig(
            templates=QuestionTemplates(**self.templates),
            expert_failure_policy=self.expert_failure_policy,
            use_expert=self.expert != "none",
            workers=self.workers,
        )

    def mpo(self) -> tuple[MpoWeights, MpoHyper]:
        return MpoWeights(self.w_p, self.w_q, self.w_g), MpoHyper(self.beta, self.delta, self.quality_arg)

    def staged_weights(self) -> StagedWeights:
        return StagedWeights(self.alpha_r, self.alpha_l, self.alpha_t, self.lambda_sr, self.lambda_fd)

    def corpus_config(self) -> CorpusConfig:
        return CorpusConfig(
            clarity_threshold=self.clarity_threshold, geometry_fraction=self.geometry_fraction
        )


def load_config(path: str | None, overrides: Mapping[str, Any]) -> RunConfig:
    data: dict[str, Any] = {}
    if path:
        try:
            loaded = yaml.safe_load(Path(path).read_text("utf-8"))
        except (OSError, yaml.YAMLError) as exc:
            raise ConfigError(f"cannot read config {path}: {exc}") from None
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"config {path} must be a mapping")
        data.update(loaded)
    data.update({k: v for k, v in overrides.items() if v is not None})
    return RunConfig.from_mapping(data)


def echo_config(cfg: RunConfig, path: Path, extra: Mapping[str, Any] | None = None) -> None:
    payload = {"version": __version__, "config": asdict(cfg), **(extra or {})}
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8")


# ---------------------------------------------------------------------------
# Subcommands
# ---------------------------------------------------------------------------


def cmd_gen_data(args: argparse.Namespace, cfg: RunConfig) -> int:
    corpus = generate_corpus(args.n, cfg.seed, cfg.corpus_config())
    out = Path(args.out)
    paths = write_corpus(corpus, out)
    echo_config(cfg, out / "config.json", {"command": "gen-data", "n": args.n})
    counts = corpus.counts()
    print(json.dumps({"out": str(out), **counts, "files": [p.name for p in paths.values()]}))
    return 0


def _build_backend(cfg: RunConfig, corpus):
    if cfg.backend == "mock":
        return scripted_backend(corpus, cfg.mock_error_rate, cfg.seed)
    if cfg.backend == "fixture":
        return load_fixture(cfg.fixture_path)
    return HttpChatBackend(
        base_url=cfg.base_url,
        model=cfg.model_name,
        path=cfg.endpoint_path,
        timeout_s=cfg.timeout_s,
        max_in_flight=cfg.workers,
    )


def cmd_run(args: argparse.Namespace, cfg: RunConfig) -> int:
    corpus = read_corpus(args.data)
    samples = samples_from(corpus.records, corpus.annotations)
    if args.limit:
        samples = samples[: args.limit]
    backend = _build_backend(cfg, corpus)
    expert = MockExpert(cfg.expert_failure_rate, cfg.seed) if cfg.expert == "mock" else None
    pcfg = cfg.pipeline_config()
    if args.probe:
        pcfg = probe_config(pcfg)
    results = run_batch(backend, expert, samples, pcfg, raise_on_failure=False)
    runs = [r for r in results if isinstance(r, PipelineRun)]
    failures = [r for r in results if isinstance(r, StageFailure)]
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_jsonl(out, runs)
    if failures:
        failed_path = out.with_suffix(".failed.jsonl")
        write_jsonl(failed_path, [{**f.partial.to_dict(), "error": str(f)} for f in failures])
        for f in failures:
            log.error("%s", f)
    echo_config(cfg, out.with_suffix(".config.json"), {"command": "run", "probe": bool(args.probe)})
    expert_calls = sum(r.expert_invoked for r in runs)
    summary = {
        "runs": len(runs),
        "failed": len(failures),
        "interactions": sum(len(r.interactions) for r in runs),
        "expert_calls": expert_calls,
        "expert_rate": round(expert_calls / len(runs), 4) if runs else 0.0,
    }
    print(json.dumps(summary))
    return 1 if failures else 0


def cmd_eval(args: argparse.Namespace, cfg: RunConfig) -> int:
    annotations = read_jsonl(Path(args.data) / FILE_NAMES["annotations"], "annotations")
    runs = read_jsonl(args.runs, "runs")
    probes = read_jsonl(args.probe_runs, "runs") if args.probe_runs else None
    report = score_runs(
        runs,
        annotations,
        probe_runs=probes,
        model_label=args.model,
        setting_label=args.setting,
        clarity_threshold=cfg.clarity_threshold,
    )
    rendered = render_report([report])
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.md").write_text(rendered.markdown, encoding="utf-8")
    (out / "report.csv").write_text(rendered.csv, encoding="utf-8")
    (out / "scores.json").write_text(dumps_line(report.to_dict()) + "\n", encoding="utf-8")
    echo_config(cfg, out / "config.json", {"command": "eval"})
    print(rendered.markdown, end="")
    return 0


def _read_scores(paths: Sequence[str]) -> list[ScoreReport]:
    out = []
    for p in paths:
        for line in Path(p).read_text("utf-8").splitlines():
            if line.strip():
                out.append(ScoreReport(**json.loads(line)))
    return out


def cmd_report(args: argparse.Namespace, cfg: RunConfig) -> int:
    if args.fixture == "table1":
        methods, baselines, references, _ = load_table1()
    elif args.scores:
        methods, baselines, references = _read_scores(args.scores), _read_scores(args.baselines or []), []
    else:
        raise ConfigError("report needs --fixture table1 or --scores FILE")
    rendered = render_report(methods, baselines, references)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "report.md").write_text(rendered.markdown, encoding="utf-8")
        (out / "report.csv").write_text(rendered.csv, encoding="utf-8")
        echo_config(cfg, out / "config.json", {"command": "report", "fixture": args.fixture})
    print(rendered.csv if args.format == "csv" else rendered.markdown, end="")
    return 0


def cmd_loss_selftest(args: argparse.Namespace, cfg: RunConfig) -> int:
    ok, checks = run_selftest(cfg.seed)
    for c in checks:
        print(c.line())
    worst = max(c.value for c in checks if c.kind == "max")
    print(f"max gradient relative error: {worst:.3e}")
    print("loss-selftest: " + ("OK" if ok else "FAILED"))
    return 0 if ok else 1


# ---------------------------------------------------------------------------
# argparse wiring
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="occcot", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML/JSON file with RunConfig keys")
    common.add_argument("--seed", type=int)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", parents=[common], help="generate a synthetic CoT corpus")
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--clarity-threshold", type=float, dest="clarity_threshold")
    p.add_argument("--geometry-fraction", type=float, dest="geometry_fraction")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", parents=[common], help="run the staged pipeline over a corpus")
    p.add_argument("--data", required=True, help="corpus directory from gen-data")
    p.add_argument("--out", required=True, help="runs.jsonl path")
    p.add_argument("--backend", choices=["mock", "fixture", "http"])
    p.add_argument("--fixture", dest="fixture_path")
    p.add_argument("--base-url", dest="base_url")
    p.add_argument("--model-name", dest="model_name")
    p.add_argument("--timeout", type=float, dest="timeout_s")
    p.add_argument("--mock-error-rate", type=float, dest="mock_error_rate")
    p.add_argument("--expert", choices=["mock", "none"])
    p.add_argument("--expert-failure-rate", type=float, dest="expert_failure_rate")
    p.add_argument("--expert-failure-policy", choices=["degrade", "fail"], dest="expert_failure_policy")
    p.add_argument("--workers", type=int)
    p.add_argument("--probe", action="store_true", help="disable expert gating (recognition probe)")
    p.add_argument("--limit", type=int, help="only the first N samples")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("eval", parents=[common], help="score runs against gold annotations")
    p.add_argument("--data", required=True)
    p.add_argument("--runs", required=True)
    p.add_argument("--probe-runs")
    p.add_argument("--out", required=True)
    p.add_argument("--model", default="OCC-MLLM-CoT-Alpha")
    p.add_argument("--setting", default="desk")
    p.add_argument("--clarity-threshold", type=float, dest="clarity_threshold")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("report", parents=[common], help="render comparison tables")
    p.add_argument("--fixture", choices=["table1"])
    p.add_argument("--scores", nargs="+")
    p.add_argument("--baselines", nargs="+")
    p.add_argument("--format", choices=["markdown", "csv"], default="markdown")
    p.add_argument("--out")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("loss-selftest", parents=[common], help="check loss values and gradients")
    p.set_defaults(func=cmd_loss_selftest)
    return parser


_OVERRIDE_KEYS = (
    "seed", "clarity_threshold", "geometry_fraction", "backend", "fixture_path", "base_url",
    "model_name", "timeout_s", "mock_error_rate", "expert", "expert_failure_rate",
    "expert_failure_policy", "workers",
)


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s",
    )
    overrides = {k: getattr(args, k) for k in _OVERRIDE_KEYS if hasattr(args, k)}
    try:
        cfg = load_config(args.config, overrides)
        return args.func(args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except Exception as exc:  # noqa: BLE001 - top-level reporting
        log.debug("failure", exc_info=True)
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
