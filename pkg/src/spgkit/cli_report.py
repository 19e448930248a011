"""Command-line front end: run the pipeline over one trace or a whole corpus and write reports."""

from __future__ import annotations

import argparse
import csv
import io
import json
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path
from typing import List, Optional, Sequence

from .analytics import (CorpusReport, SensitiveApiGroups, bucketed_waves, build_report, load_default_groups,
                        load_groups, round_or_none)
from .errors import CatalogError, ConfigError, SpgkitError, TraceError
from .fp_filter import DEFAULT_OVERLAP_THRESHOLD, BaselineProfile, filter_analysis, load_baseline
from .sample_analysis import SampleAnalysis, analyze_trace
from .signature_engine import SignatureCatalog, load_catalog, load_default_catalog
from .spg_builder import DEFAULT_PATH_BUDGET, to_dot
from .trace_model import DEFAULT_INSTRUCTION_FLOOR, SampleMeta, load_manifest, parse_trace, validate_sample_viability

EXIT_OK, EXIT_PARTIAL, EXIT_CONFIG = 0, 1, 2


@dataclass(frozen=True)
class RunConfig:
    corpus_manifest_path: Optional[str] = None
    catalog_path: Optional[str] = None  # None: shipped catalog
    baseline_path: Optional[str] = None  # None: no false-positive filtering
    sensitive_groups_path: Optional[str] = None  # None: shipped groups
    output_dir: Optional[str] = None
    path_budget: int = DEFAULT_PATH_BUDGET
    instruction_floor: int = DEFAULT_INSTRUCTION_FLOOR
    overlap_threshold: float = DEFAULT_OVERLAP_THRESHOLD
    parallelism: int = 1

    def __post_init__(self):
        if not 0 < self.overlap_threshold < 1:
            raise ConfigError(f"overlap_threshold must be in (0, 1), got {self.overlap_threshold}")
        if self.instruction_floor < 0:
            raise ConfigError(f"instruction_floor must be >= 0, got {self.instruction_floor}")
        if self.path_budget <= 0:
            raise ConfigError(f"path_budget must be > 0, got {self.path_budget}")
        if self.parallelism < 1:
            raise ConfigError(f"parallelism must be >= 1, got {self.parallelism}")


@dataclass(frozen=True)
class Resources:
    catalog: SignatureCatalog
    baseline: Optional[BaselineProfile]
    groups: SensitiveApiGroups


def _read(path: str, what: str) -> bytes:
    try:
        return Path(path).read_bytes()
    except OSError as exc:
        raise ConfigError(f"cannot read {what} {path}: {exc.strerror}") from None


def load_resources(config: RunConfig) -> Resources:
    catalog = load_catalog(_read(config.catalog_path, "catalog")) if config.catalog_path else load_default_catalog()
    baseline = load_baseline(_read(config.baseline_path, "baseline")) if config.baseline_path else None
    groups = (load_groups(_read(config.sensitive_groups_path, "sensitive groups"))
              if config.sensitive_groups_path else load_default_groups())
    return Resources(catalog, baseline, groups)


@dataclass(frozen=True)
class SampleResult:
    sample_id: str
    status: str  # "ok", "discarded" or "failed"
    analysis: Optional[SampleAnalysis] = None
    detail: Optional[str] = None


def _analyze(raw: bytes, meta: Optional[SampleMeta], config: RunConfig, res: Resources) -> SampleResult:
    sid = meta.sample_id if meta else ""
    trace = parse_trace(raw)
    v = validate_sample_viability(trace, config.instruction_floor)
    if not v.viable:
        return SampleResult(sid, "discarded", detail=v.reason)
    a = analyze_trace(trace, meta, res.catalog, config.path_budget)
    if res.baseline is not None:
        a = filter_analysis(a, res.baseline, config.overlap_threshold)
    return SampleResult(sid, "ok", a)


def run_sample(config: RunConfig, trace_path: str, meta: Optional[SampleMeta] = None,
               resources: Optional[Resources] = None) -> SampleResult:
    """Parse, build, match and filter one trace.  Errors propagate with their file context."""
    res = resources or load_resources(config)
    try:
        raw = Path(trace_path).read_bytes()
    except OSError as exc:
        raise TraceError(f"{trace_path}: {exc.strerror}") from None
    try:
        return _analyze(raw, meta, config, res)
    except SpgkitError as exc:
        if not isinstance(exc, ConfigError):
            exc.args = (f"{trace_path}: {exc}",)
        raise


# worker state for process pools; shared inputs are loaded once per worker
_WORKER: dict = {}


def _init_worker(config: RunConfig):
    _WORKER["config"] = config
    _WORKER["res"] = load_resources(config)


def _run_one(meta: SampleMeta) -> SampleResult:
    config, res = _WORKER["config"], _WORKER["res"]
    try:
        return run_sample(config, meta.trace_path, meta, res)
    except SpgkitError as exc:
        return SampleResult(meta.sample_id, "failed", detail=str(exc))


def run_samples(config: RunConfig, metas: Sequence[SampleMeta]) -> List[SampleResult]:
    if config.parallelism == 1 or len(metas) < 2:
        _init_worker(config)
        return [_run_one(m) for m in metas]
    with ProcessPoolExecutor(config.parallelism, initializer=_init_worker, initargs=(config,)) as pool:
        return list(pool.map(_run_one, metas, chunksize=max(1, len(metas) // (4 * config.parallelism))))


@dataclass(frozen=True)
class CorpusRun:
    report: CorpusReport
    analyses: List[SampleAnalysis]
    discarded: List[SampleResult]
    failed: List[SampleResult]


def run_corpus(config: RunConfig) -> CorpusRun:
    if not config.corpus_manifest_path:
        raise ConfigError("no corpus manifest given")
    res = load_resources(config)  # fail fast on bad config before spawning workers
    metas = load_manifest(config.corpus_manifest_path)
    if not metas:
        raise ConfigError("manifest lists no samples")
    results = run_samples(config, metas)
    ok = [r.analysis for r in results if r.status == "ok"]
    discarded = sorted((r for r in results if r.status == "discarded"), key=lambda r: r.sample_id)
    failed = sorted((r for r in results if r.status == "failed"), key=lambda r: r.sample_id)
    if len(failed) == len(results):
        raise SpgkitError(f"all {len(results)} samples failed; first: {failed[0].detail}")
    ok.sort(key=lambda a: (a.meta.family, a.meta.first_seen_year or 0, a.meta.sample_id))
    return CorpusRun(build_report(ok, res.catalog, res.groups), ok, discarded, failed)


# -- output ---------------------------------------------------------------------

def _csv(header, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow(["" if x is None else x for x in r])
    return buf.getvalue()


def _r(x):
    return round_or_none(x, 6)


def report_tables(rep: CorpusReport) -> dict:
    """file name -> CSV text.  Row order is fixed by sorting, never by run order."""
    d = rep.distributions
    t = {}
    for name, hist in (("process_counts", d.process_count), ("process_depth", d.process_depth),
                       ("width", d.width), ("sample_waves", d.wave_count)):
        t[f"{name}.csv"] = _csv(["value", "samples"], sorted(hist.items()))
    t["sample_wave_buckets.csv"] = _csv(["bucket", "samples"], bucketed_waves(d.wave_count).items())
    rows = [("initial", v, n) for v, n in sorted(rep.waves.initial_histogram.items())]
    rows += [("non_initial", v, n) for v, n in sorted(rep.waves.non_initial_histogram.items())]
    t["process_waves.csv"] = _csv(["role", "waves", "processes"], rows)
    t["family_consistency.csv"] = _csv(
        ["family", "S", "M", "stability", "m_ratio", "sigma", "sigma_eq", "s_eq", "seq_ratio", "family_consistency"],
        [(f.family, f.S, f.M, _r(f.stability), _r(f.m_ratio), f.sigma, f.sigma_eq, f.s_eq, _r(f.seq_ratio),
          _r(f.family_consistency)) for f in sorted(rep.families, key=lambda f: f.family)])
    t["target_intersections.csv"] = _csv(
        ["family", "M", "I", "shared_targets", "I_prime", "T", "i_over_m", "iprime_over_t"],
        [(x.family, x.M, x.I, ";".join(x.shared), x.I_prime, x.T, _r(x.i_over_m), _r(x.iprime_over_t))
         for x in sorted(rep.intersections, key=lambda x: x.family)])
    t["signature_usage.csv"] = _csv(["signature_id", "injections", "samples", "families"],
                                    [(u.signature_id, u.injections, u.samples, u.families) for u in rep.signature_usage])
    t["family_signatures.csv"] = _csv(["family", "signature_id", "injections", "samples"],
                                      [(f, *row) for f in sorted(rep.family_signatures)
                                       for row in rep.family_signatures[f]])
    t["target_names.csv"] = _csv(["image_name", "processes"], rep.target_names.items())
    for name, table in (("family_depths", rep.family_depths), ("family_widths", rep.family_widths)):
        t[f"{name}.csv"] = _csv(["family", "value", "samples"],
                                [(f, v, n) for f in sorted(table) for v, n in sorted(table[f].items())])
    t["family_waves.csv"] = _csv(["family", "mean", "std", "error_bar"],
                                 [(w.family, _r(w.mean), _r(w.std), _r(w.error_bar))
                                  for w in sorted(rep.family_waves, key=lambda w: w.family)])
    s = rep.sensitive
    groups = list(s.per_process_avg)
    header = ["family", "samples"] + [f"{g}_{role}" for g in groups for role in ("initial", "non_initial")]
    rows = [(r.family, r.samples, *(n for g in groups for n in r.counts[g]))
            for r in sorted(s.rows, key=lambda r: r.family)]
    rows.append((s.total.family, s.total.samples, *(n for g in groups for n in s.total.counts[g])))
    t["sensitive_api.csv"] = _csv(header, rows)
    t["sensitive_api_processes.csv"] = _csv(["api", "initial_processes", "non_initial_processes"],
                                            [(api, *n) for api, n in s.process_counts.items()])
    t["yearly.csv"] = _csv(["year", "samples", "families", "mean_processes", "std", "std_sample", "signatures",
                            "first_used"],
                           [(y.year, y.samples, y.families, _r(y.mean_processes), _r(y.std), _r(y.std_sample),
                             y.signatures, y.first_used) for y in rep.years])
    t["droppers.csv"] = _csv(["family", "M", "dropper_samples"],
                             [(f, *v) for f, v in sorted(rep.droppers.per_family.items())])
    return t


def summary_doc(run: CorpusRun) -> dict:
    rep = run.report
    d = rep.distributions
    s = rep.sensitive
    return {
        "samples": d.samples,
        "multi_process_count": d.multi_process_count,
        "multi_process_rate": _r(d.multi_process_rate),
        "histograms": {
            "process_count": {str(k): v for k, v in sorted(d.process_count.items())},
            "process_depth": {str(k): v for k, v in sorted(d.process_depth.items())},
            "width": {str(k): v for k, v in sorted(d.width.items())},
        },
        "injections_total": rep.injections_total,
        "access_split": dict(zip(("open_existing", "launch_new", "shell_launch"), rep.access_split)),
        "droppers": {"dropper": rep.droppers.dropper_propagations, "non_dropper": rep.droppers.non_dropper,
                     "propagations": rep.droppers.propagations},
        "waves": {"initial_mean": _r(rep.waves.initial_mean), "non_initial_mean": _r(rep.waves.non_initial_mean)},
        "instructions": {"initial_mean": _r(rep.instructions.initial_mean),
                         "non_initial_mean": _r(rep.instructions.non_initial_mean)},
        "family_averages": {k: _r(v) for k, v in rep.family_averages.items()},
        "sensitive_total": {g: list(v) for g, v in s.total.counts.items()},
        "sensitive_per_process_avg": {g: [_r(a), _r(b)] for g, (a, b) in s.per_process_avg.items()},
        "discarded": [{"sample_id": r.sample_id, "reason": r.detail} for r in run.discarded],
        "failed": [{"sample_id": r.sample_id, "error": r.detail} for r in run.failed],
    }


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def write_corpus_outputs(run: CorpusRun, out: Path, per_sample: bool = True):
    out.mkdir(parents=True, exist_ok=True)
    for name, text in report_tables(run.report).items():
        (out / name).write_text(text)
    (out / "summary.json").write_text(_dump(summary_doc(run)))
    if per_sample:
        (out / "samples").mkdir(exist_ok=True)
        (out / "dot").mkdir(exist_ok=True)
        for a in run.analyses:
            sid = a.meta.sample_id
            (out / "samples" / f"{sid}.json").write_text(_dump(a.to_dict()))
            (out / "dot" / f"{sid}.dot").write_text(to_dot(a.spg, "s" + sid[:12]))


# -- command line -----------------------------------------------------------------

def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="spgkit", description=__doc__)
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, corpus=False):
        if corpus:
            sp.add_argument("--corpus", required=True, help="JSONL manifest")
        sp.add_argument("--catalog", help="signature catalog (JSONL); defaults to the shipped one")
        sp.add_argument("--baseline", help="baseline API profiles (JSONL); enables false-positive filtering")
        sp.add_argument("--groups", help="sensitive API groups (JSON)")
        sp.add_argument("--out", help="output directory (falls back to $SPGKIT_OUT)")
        sp.add_argument("--path-budget", type=int, default=DEFAULT_PATH_BUDGET)
        sp.add_argument("--instruction-floor", type=int, default=DEFAULT_INSTRUCTION_FLOOR)
        sp.add_argument("--overlap-threshold", type=float, default=DEFAULT_OVERLAP_THRESHOLD)
        sp.add_argument("--jobs", type=int, default=1)

    sp = sub.add_parser("analyze-sample", help="analyze one trace")
    sp.add_argument("trace")
    common(sp)
    sp = sub.add_parser("analyze-corpus", help="analyze every sample in a manifest and write reports")
    common(sp, corpus=True)
    sp = sub.add_parser("export-dot", help="write the propagation graph of one trace as DOT")
    sp.add_argument("trace")
    common(sp)
    sp = sub.add_parser("validate-catalog", help="load a catalog and report unreachable or misclassified entries")
    sp.add_argument("--catalog")
    return p


def _config(args) -> RunConfig:
    out = args.out or os.environ.get("SPGKIT_OUT") or None
    return RunConfig(
        corpus_manifest_path=getattr(args, "corpus", None),
        catalog_path=args.catalog,
        baseline_path=args.baseline,
        sensitive_groups_path=args.groups,
        output_dir=out,
        path_budget=args.path_budget,
        instruction_floor=args.instruction_floor,
        overlap_threshold=args.overlap_threshold,
        parallelism=args.jobs,
    )


def _cmd_sample(args, dot_only=False) -> int:
    config = _config(args)
    r = run_sample(config, args.trace)
    name = Path(args.trace).stem
    if r.status == "discarded":
        print(f"discarded: {args.trace}: {r.detail}", file=sys.stderr)
        return EXIT_OK
    dot = to_dot(r.analysis.spg)
    doc = _dump(r.analysis.to_dict())
    if config.output_dir:
        out = Path(config.output_dir)
        out.mkdir(parents=True, exist_ok=True)
        (out / f"{name}.dot").write_text(dot)
        if not dot_only:
            (out / f"{name}.json").write_text(doc)
    else:
        sys.stdout.write(dot if dot_only else doc)
    return EXIT_OK


def _cmd_corpus(args) -> int:
    config = _config(args)
    if not config.output_dir:
        raise ConfigError("no output directory: pass --out or set SPGKIT_OUT")
    run = run_corpus(config)
    write_corpus_outputs(run, Path(config.output_dir))
    print(f"{len(run.analyses)} analyzed, {len(run.discarded)} discarded, {len(run.failed)} failed")
    for r in run.failed:
        print(f"failed: {r.sample_id}: {r.detail}", file=sys.stderr)
    return EXIT_PARTIAL if run.failed else EXIT_OK


def _cmd_catalog(args) -> int:
    cat = load_catalog(_read(args.catalog, "catalog")) if args.catalog else load_default_catalog()
    print(f"{len(cat)} signatures")
    for sig, by in cat.shadowed():
        print(f"signature {sig} is unreachable: same sequence as {by}")
    for sig, stored, derived in cat.class_mismatches():
        print(f"signature {sig}: access class {stored.value} differs from derived {derived.value}")
    return EXIT_OK


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = _parser().parse_args(argv)
    try:
        if args.command == "analyze-sample":
            return _cmd_sample(args)
        if args.command == "export-dot":
            return _cmd_sample(args, dot_only=True)
        if args.command == "analyze-corpus":
            return _cmd_corpus(args)
        return _cmd_catalog(args)
    except (ConfigError, CatalogError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except SpgkitError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARTIAL


if __name__ == "__main__":
    sys.exit(main())
