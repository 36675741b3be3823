"""Command-line entry point: ``ssrnas {search,oracle,verify,ablate,cardinality}``.

Exit codes: 0 success, 1 configuration error or unknown command, 2 runtime
failure, 3 search finished without reaching a discrete architecture.
The file formats are described in the README.
"""
from __future__ import annotations

import argparse
import dataclasses
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml

from . import adcore as ad
from .archspace import (ConfigError, SpaceConfig, StageSpec, build_supernet, cardinality_log10, paper_space,
                        space_count, tiny_space)
from .bench import Dataset, TaskConfig, exact_flops, gen_task, oracle_rank
from .costmodel import CostSpec
from .engine import SearchAborted, SearchConfig, arch_loss_terms, retrain, run_search
from .regloss import check_l0_equivalence, entropy, ssr_loss

COMMANDS = ("search", "oracle", "verify", "ablate", "cardinality")
OUTPUT_ROOT_ENV = "SSRNAS_OUTPUT_ROOT"
EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME, EXIT_NOT_CONVERGED = 0, 1, 2, 3

USAGE = """usage: ssrnas COMMAND [--config FILE] [--run-id ID] [--output-root DIR]

commands:
  search       run one architecture search
  oracle       retrain every architecture of a small space and rank them
  verify       numerical checks of the SSR / L0 relationship and of the gradients
  ablate       compare regularizers over several seeds
  cardinality  print the size of the configured space
"""


@dataclass(frozen=True)
class OracleOptions:
    budget: int = 60
    seed: int = 0
    workers: int = 1
    cap: int = 10_000


@dataclass(frozen=True)
class AblateOptions:
    arms: tuple = ("SSR", "L1", "L2", "IE", "none")
    seeds: tuple = (0, 1, 2)
    workers: int = 1


@dataclass(frozen=True)
class VerifyOptions:
    m_values: tuple = (1e-2, 1e-3, 1e-4)
    points: int = 100
    fd_states: int = 10
    seed: int = 0


@dataclass(frozen=True)
class RunConfig:
    space: SpaceConfig
    task: TaskConfig
    search: SearchConfig
    oracle: OracleOptions = OracleOptions()
    ablate: AblateOptions = AblateOptions()
    verify: VerifyOptions = VerifyOptions()
    output_dir: str = ""
    run_id: str = "run"

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return json.loads(json.dumps(d, default=list))


# ---------------------------------------------------------------------------
# config parsing
# ---------------------------------------------------------------------------

def _check_keys(data: dict, allowed, path: str):
    if not isinstance(data, dict):
        raise ConfigError(f"{path or 'config'}: expected a mapping")
    for k in data:
        if k not in allowed:
            raise ConfigError(f"{path + '.' if path else ''}{k}: unknown key")


def _build(cls, data: dict | None, path: str, convert=None):
    data = dict(data or {})
    names = [f.name for f in dataclasses.fields(cls)]
    _check_keys(data, names, path)
    for k, fn in (convert or {}).items():
        if k in data:
            data[k] = fn(data[k])
    try:
        return cls(**data)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{path}: {exc}") from None


def _space(data: dict | None, task: TaskConfig) -> SpaceConfig:
    data = dict(data or {})
    allowed = ("preset", "stages", "dilations", "spatials", "length", "in_channels", "num_classes", "kernel")
    _check_keys(data, allowed, "space")
    preset = data.pop("preset", "tiny")
    if preset not in ("tiny", "paper"):
        raise ConfigError("space.preset: must be 'tiny' or 'paper'")
    # the data-facing fields follow the task unless given explicitly
    base = dataclasses.replace(tiny_space() if preset == "tiny" else paper_space(), length=task.length,
                               in_channels=task.in_channels, num_classes=task.num_classes)
    if "stages" in data:
        stages = []
        for i, st in enumerate(data.pop("stages")):
            _check_keys(st, ("depths", "width", "channels"), f"space.stages[{i}]")
            try:
                stages.append(StageSpec(tuple(st["depths"]), int(st["width"]),
                                        tuple(st["channels"]) if st.get("channels") else None))
            except KeyError as exc:
                raise ConfigError(f"space.stages[{i}].{exc.args[0]}: required") from None
        data["stages"] = tuple(stages)
    for k in ("dilations", "spatials"):
        if k in data:
            data[k] = tuple(data[k])
    space = dataclasses.replace(base, **data)
    try:
        return space.validate()
    except ConfigError as exc:
        raise ConfigError(f"space.{exc}") from None


def _search(data: dict | None) -> SearchConfig:
    data = dict(data or {})
    cost = data.pop("cost", None)
    rho = data.pop("rho", None)
    cfg = _build(SearchConfig, data, "search")
    if rho is not None:
        _check_keys(rho, ("depth", "dilation-spatial", "channel"), "search.rho")
        cfg = dataclasses.replace(cfg, rho={**cfg.rho, **rho})
    if cost is not None:
        cfg = dataclasses.replace(cfg, cost=_build(CostSpec, cost, "search.cost"))
    if not 0 < cfg.h < 1:
        raise ConfigError("h must be in (0,1)")
    try:
        return cfg.validate()
    except ConfigError as exc:
        raise ConfigError(f"search.{exc}") from None


def config_from_dict(data: dict | None) -> RunConfig:
    data = dict(data or {})
    _check_keys(data, ("space", "task", "search", "oracle", "ablate", "verify", "output_dir", "run_id"), "")
    task = _build(TaskConfig, data.get("task"), "task", {"widths": tuple})
    try:
        task.validate()
    except ConfigError as exc:
        raise ConfigError(f"task.{exc}") from None
    space = _space(data.get("space"), task)
    if (space.length, space.in_channels, space.num_classes) != (task.length, task.in_channels, task.num_classes):
        raise ConfigError("space: length, in_channels and num_classes must match the task")
    run_id = str(data.get("run_id") or "run")
    if "/" in run_id or run_id in (".", ".."):
        raise ConfigError("run_id: must be a plain directory name")
    return RunConfig(
        space=space, task=task, search=_search(data.get("search")),
        oracle=_build(OracleOptions, data.get("oracle"), "oracle"),
        ablate=_build(AblateOptions, data.get("ablate"), "ablate", {"arms": tuple, "seeds": tuple}),
        verify=_build(VerifyOptions, data.get("verify"), "verify", {"m_values": tuple}),
        output_dir=str(data.get("output_dir") or os.environ.get(OUTPUT_ROOT_ENV, "runs")),
        run_id=run_id)


def parse_config(path) -> RunConfig:
    """Read a YAML run configuration; unknown keys and invalid values raise ConfigError."""
    try:
        with open(path) as fh:
            data = yaml.safe_load(fh)
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"config: invalid YAML: {exc}") from None
    return config_from_dict(data)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def _run_dir(config: RunConfig) -> Path:
    path = Path(config.output_dir) / config.run_id
    if path.exists():
        raise ConfigError(f"run_id: {path} already exists")
    path.mkdir(parents=True)
    (path / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    return path


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def architecture_table(arch) -> str:
    rows = [("Stage", "Depth", "Dilation", "Spatial", "Channels")]
    for si, st in enumerate(arch.stages):
        for li, layer in enumerate(st.layers):
            rows.append((str(si + 1), f"{li + 1}/{st.depth}", str(layer.dilation), str(layer.spatial),
                         "-".join(str(c) for c in layer.channels)))
        if not st.layers:
            rows.append((str(si + 1), "0/0", "-", "-", "-"))
    widths = [max(len(r[i]) for r in rows) for i in range(5)]
    return "\n".join("  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in rows) + "\n"


def _search_into(path: Path, search: SearchConfig, dataset: Dataset, space: SpaceConfig):
    with open(path / "trajectory.jsonl", "w") as fh:
        def sink(rec):
            fh.write(rec.to_json() + "\n")
            fh.flush()
        arch, _, report = run_search(search, dataset, space, on_record=sink)
    _write_json(path / "architecture.json", {"encoded": arch.encode(), **arch.to_dict()})
    (path / "architecture.txt").write_text(architecture_table(arch))
    _write_json(path / "gap_report.json", report.to_dict())
    return arch, report


def cmd_search(config: RunConfig) -> int:
    path = _run_dir(config)
    _, report = _search_into(path, config.search, gen_task(config.task), config.space)
    print(f"converged={report.converged} epochs={report.epochs_run} gap={report.gap:.6g}")
    return EXIT_OK if report.converged else EXIT_NOT_CONVERGED


def cmd_oracle(config: RunConfig) -> int:
    space_count_ = space_count(config.space)
    if space_count_ > config.oracle.cap:
        raise ConfigError(f"space: {space_count_} architectures exceed the enumeration cap {config.oracle.cap}")
    path = _run_dir(config)
    o = config.oracle
    entries = oracle_rank(config.space, gen_task(config.task), o.budget, o.seed, config.search, o.workers, o.cap)
    with open(path / "oracle.jsonl", "w") as fh:
        for rank, e in enumerate(entries, start=1):
            fh.write(json.dumps({"rank": rank, **e.to_dict()}, sort_keys=True) + "\n")
    lines = [f"{'rank':>4}  {'metric':>7}  {'flops':>9}  arch"]
    lines += [f"{r:>4}  {e.metric:7.4f}  {e.flops:9.0f}  {e.arch.encode()}" for r, e in enumerate(entries, 1)]
    (path / "oracle.txt").write_text("\n".join(lines) + "\n")
    print(f"{len(entries)} architectures ranked; best {entries[0].arch.encode()} ({entries[0].metric:.4f})")
    return EXIT_OK


def finite_difference_suite(space: SpaceConfig, task: TaskConfig, states: int, seed: int) -> list[dict]:
    """Finite-difference checks of the losses the search differentiates."""
    rng = np.random.default_rng(seed)
    results = []
    for fn_name, fn in (("ssr_loss", ssr_loss), ("entropy", entropy)):
        for _ in range(states):
            p = rng.dirichlet(np.ones(4))
            results.append({"function": fn_name, "error": ad.finite_diff_check(fn, p)})
    small = dataclasses.replace(task, n_train=8, n_val=0, n_test=0)
    x, y = gen_task(small).part("train")
    net, groups = build_supernet(space, seed)
    cfg = SearchConfig()
    for _ in range(states):
        for g in groups:
            g.logits.values = rng.normal(size=g.size)
        target = groups[0]

        def loss(theta, target=target):
            saved = target.logits
            target.logits = theta if isinstance(theta, ad.Tensor) else ad.Tensor(theta)
            try:
                total = arch_loss_terms(net, groups, (x, y), cfg)[0]
                return total if isinstance(theta, ad.Tensor) else float(ad.value_of(total))
            finally:
                target.logits = saved

        results.append({"function": "total_arch_loss", "error": _fd_with_tape(loss, target.logits.values.copy())})
    return results


def _fd_with_tape(fn, point, step: float = 1e-6) -> float:
    """Like ``adcore.finite_diff_check`` for functions that read parameters as tensors."""
    leaf = ad.Tensor(point.copy())
    tape = ad.Tape()
    with tape:
        out = fn(leaf)
    ad.backward(tape, out)
    analytic = leaf.grad
    numeric = np.zeros_like(point)
    with ad.no_grad():
        for i in range(point.size):
            e = np.zeros_like(point)
            e.flat[i] = step
            numeric.flat[i] = (fn(point + e) - fn(point - e)) / (2 * step)
    return float(np.max(np.abs(analytic - numeric)) / max(np.max(np.abs(analytic)), 1e-12))


def cmd_verify(config: RunConfig) -> int:
    path = _run_dir(config)
    v = config.verify
    rng = np.random.default_rng(v.seed)
    sweep = []
    ok = True
    for _ in range(v.points):
        p = rng.dirichlet(np.ones(int(rng.integers(2, 8))))
        rep = check_l0_equivalence(p, list(v.m_values))
        ok &= rep.within_bounds and rep.gradient_factorization_error <= 1e-9
        sweep.append({"p": p.tolist(), **rep.to_dict()})
    fd = finite_difference_suite(config.space, config.task, v.fd_states, v.seed)
    fd_ok = all(r["error"] <= 1e-6 for r in fd)
    report = {"equivalence": sweep, "all_within_bounds": bool(ok), "finite_difference": fd,
              "finite_difference_ok": fd_ok}
    _write_json(path / "verify.json", report)
    print(f"taylor residuals within bound: {ok}; finite differences within 1e-6: {fd_ok}")
    return EXIT_OK if ok and fd_ok else EXIT_RUNTIME


def _ablate_arm(args):
    path, arm, seed, search, dataset, space = args
    cfg = dataclasses.replace(search, regularizer=arm, seed=seed, shrinking=arm != "none")
    run = Path(path) / f"{arm}-seed{seed}"
    run.mkdir()
    arch, report = _search_into(run, cfg, dataset, space)
    _, metric = retrain(arch, dataset, cfg, space=space)
    return {"arm": arm, "seed": seed, "arch": arch.encode(), "converged": report.converged,
            "zero_entropy_epoch": report.zero_entropy_epoch, "final_entropy": report.final_entropy,
            "gap": report.gap, "retrain_metric": metric, "flops": exact_flops(arch, space)}


def cmd_ablate(config: RunConfig) -> int:
    path = _run_dir(config)
    dataset = gen_task(config.task)
    jobs = [(str(path), arm, seed, config.search, dataset, config.space)
            for arm in config.ablate.arms for seed in config.ablate.seeds]
    if config.ablate.workers > 1:
        with ProcessPoolExecutor(max_workers=config.ablate.workers) as pool:
            rows = list(pool.map(_ablate_arm, jobs))
    else:
        rows = [_ablate_arm(j) for j in jobs]
    with open(path / "ablation.jsonl", "w") as fh:
        for r in rows:
            fh.write(json.dumps(r, sort_keys=True) + "\n")
    lines = [f"{'arm':<5} {'seed':>4} {'zero@':>6} {'entropy':>8} {'gap':>9} {'metric':>7}  arch"]
    for r in rows:
        zero = "-" if r["zero_entropy_epoch"] is None else str(r["zero_entropy_epoch"])
        lines.append(f"{r['arm']:<5} {r['seed']:>4} {zero:>6} {r['final_entropy']:8.4f} {r['gap']:9.5f} "
                     f"{r['retrain_metric']:7.4f}  {r['arch']}")
    (path / "ablation.txt").write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return EXIT_OK


def cmd_cardinality(config: RunConfig) -> int:
    paper = cardinality_log10(config.space, "paper")
    exact = cardinality_log10(config.space, "enumeration")
    mantissa = 10 ** (paper - math.floor(paper))
    print(f"log10 = {paper:.2f}")
    print(f"≈ {mantissa:.2f}e{math.floor(paper)}")
    print(f"enumerated architectures: log10 = {exact:.2f}")
    return EXIT_OK


HANDLERS = {"search": cmd_search, "oracle": cmd_oracle, "verify": cmd_verify, "ablate": cmd_ablate,
            "cardinality": cmd_cardinality}


def dispatch(command: str, config: RunConfig) -> int:
    """Run one command and map failures to exit codes."""
    if command not in HANDLERS:
        print(USAGE, file=sys.stderr)
        return EXIT_CONFIG
    try:
        return HANDLERS[command](config)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (SearchAborted, ArithmeticError, RuntimeError, ValueError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    if not argv or argv[0] not in COMMANDS:
        print(USAGE, file=sys.stderr)
        return EXIT_CONFIG
    parser = argparse.ArgumentParser(prog=f"ssrnas {argv[0]}")
    parser.add_argument("--config", help="YAML run configuration")
    parser.add_argument("--run-id", help="name of the run directory (overrides the config)")
    parser.add_argument("--output-root", help=f"parent of run directories (default ${OUTPUT_ROOT_ENV} or ./runs)")
    try:
        args = parser.parse_args(argv[1:])
    except SystemExit:
        return EXIT_CONFIG
    try:
        data = {}
        if args.config:
            with open(args.config) as fh:
                data = yaml.safe_load(fh) or {}
        elif argv[0] == "cardinality":
            data = {"space": {"preset": "paper"}}
        if args.run_id:
            data["run_id"] = args.run_id
        if args.output_root:
            data["output_dir"] = args.output_root
        config = config_from_dict(data)
    except OSError as exc:
        print(f"config error: cannot read {args.config}: {exc.strerror}", file=sys.stderr)
        return EXIT_CONFIG
    except (ConfigError, yaml.YAMLError) as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    return dispatch(argv[0], config)


if __name__ == "__main__":
    sys.exit(main())
