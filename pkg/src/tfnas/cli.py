"""Command-line entry point: ``tfnas <command> ...``."""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .errors import TFNASError


def _config(path):
    from .space import SupernetConfig
    return SupernetConfig.load(path) if path else SupernetConfig.default()


def _data(path, config):
    from .data import DataSpec
    if path:
        return DataSpec.load(path)
    return DataSpec(class_count=config.class_count, dim=config.input_dim)


def cmd_lut_build(a):
    from .latmodel import BenchSpec, build_lut_measured, build_lut_synthetic, lut_save
    config = _config(a.config)
    if a.mode == "synthetic":
        table = build_lut_synthetic(config, stride=a.stride)
    else:
        table = build_lut_measured(config, BenchSpec(repeats=a.repeats, batch=a.batch),
                                   stride=a.stride)
    lut_save(table, a.out)
    print(f"wrote {len(table.entries)} signatures to {a.out}")


def cmd_search(a):
    from .arch import export_arch
    from .harness import export_metrics
    from .latmodel import build_lut_synthetic, lut_load
    from .optimizer import LatencyObjective, Schedule, SearchFlags, run_search
    from .data import make_dataset

    config = _config(a.config)
    lut = lut_load(a.lut) if a.lut else build_lut_synthetic(config)
    obj = LatencyObjective(a.objective, a.lambda1,
                           a.target_ms if a.objective == "ours" else None, a.lambda2)
    flags = SearchFlags(a.second_path.replace("-", "_"), a.depth_space.replace("-", "_"),
                        a.lat_weighting, not a.no_elastic, target_ms=a.target_ms)
    sched = Schedule(epochs=a.epochs, warmup_epochs=min(a.warmup, a.epochs - 1))
    data = make_dataset(_data(a.data_spec, config))
    arch, log, _ = run_search(config, lut, obj, sched, flags, a.seed, data, a.run_dir)
    if a.metrics_out:
        export_metrics(log, a.metrics_out)
    if a.arch_out:
        export_arch(arch, a.arch_out)
    last = log[-1]
    print(f"derived latency {last.derived_latency_ms:.4f} ms, depths {arch.depths}")


def cmd_plan(a):
    from .arch import import_arch
    from .elastic import SeedLayer, SeedNetwork, scale_seed
    from .latmodel import lut_load

    arch = import_arch(a.arch)
    lut = lut_load(a.lut)
    layers, stage_ids = [], [s.index for s in arch.stages if s.searchable]
    for s in arch.stages:
        if not s.searchable:
            continue
        for l in s.layers:
            layers.append(SeedLayer(l.layer_index, l.op_index, stage_ids.index(s.index),
                                    l.width, l.width_floor, l.width_cap, l.base_signature))
    seed = SeedNetwork(layers, arch.depths)
    before = seed.latency(lut)
    plan = scale_seed(seed, a.target_ms, lut)
    for l, sl in zip(arch.searchable_layers, seed.layers):
        l.width = sl.width
        l.se_width = l.se_width_for(sl.width)
    if a.out:
        from .arch import export_arch
        export_arch(arch, a.out)
    print(json.dumps({"latency_before_ms": before, "latency_after_ms": plan.latency_ms,
                      "infeasible": plan.infeasible, "passes": plan.passes,
                      "widths": seed.widths}, indent=2))


def cmd_derive(a):
    from .arch import export_arch
    from .derive import derive_architecture
    from .optimizer import load_state

    net, flags, state = load_state(a.state)
    arch = derive_architecture(net, depth_mode=flags.depth_mode,
                               provenance={"seed": state.get("seed"),
                                           "epoch": state.get("epoch", 0) - 1})
    export_arch(arch, a.out)
    print(f"wrote {a.out}")


def cmd_train(a):
    from .arch import import_arch
    from .data import DataSpec, make_dataset
    from .derive import train_from_scratch
    from .latmodel import lut_load

    arch = import_arch(a.arch)
    spec = DataSpec.load(a.data_spec) if a.data_spec else DataSpec(
        class_count=arch.class_count, dim=arch.input_dim)
    lut = lut_load(a.lut) if a.lut else None
    rep = train_from_scratch(arch, make_dataset(spec), a.epochs, a.seed, lut)
    if a.report:
        Path(a.report).write_text(rep.to_json() + "\n")
    print(rep.to_json())


def cmd_eval(a):
    from .arch import import_arch
    from .derive import analytic_cost
    from .latmodel import arch_latency, lut_load

    arch = import_arch(a.arch)
    lut = lut_load(a.lut)
    print(json.dumps({"latency_ms": arch_latency(arch, lut),
                      "analytic_cost": analytic_cost(arch), "depths": arch.depths}, indent=2))


def cmd_ablate(a):
    from .harness import AblationSpec, run_ablation
    from .latmodel import lut_load

    values = [v.strip() for v in a.values.split(",") if v.strip()]
    seeds = [int(s) for s in a.seeds.split(",") if s.strip()]
    config = _config(a.config)
    spec = AblationSpec(a.axis, values, seeds, config=config,
                        lut=lut_load(a.lut) if a.lut else None, target_ms=a.target_ms,
                        epochs=a.epochs, warmup_epochs=min(a.warmup, a.epochs - 1),
                        eval_epochs=a.eval_epochs,
                        data=_data(a.data_spec, config))
    rows = run_ablation(spec, a.out, jobs=a.jobs)
    bad = [r for r in rows if r["status"] != "ok"]
    print(f"{len(rows)} rows written to {a.out}; {len(bad)} failed")


def cmd_metrics_export(a):
    from .harness import export_metrics, load_metrics_json
    export_metrics(load_metrics_json(Path(a.run) / "metrics.json"), a.out)
    print(f"wrote {a.out}")


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tfnas", description="Latency-constrained architecture search")
    sub = p.add_subparsers(dest="command", required=True)

    lut = sub.add_parser("lut", help="latency tables").add_subparsers(dest="lut_cmd", required=True)
    b = lut.add_parser("build", help="build a latency table")
    b.add_argument("--config")
    b.add_argument("--mode", choices=["synthetic", "measured"], default="synthetic")
    b.add_argument("--stride", type=int)
    b.add_argument("--repeats", type=int, default=5)
    b.add_argument("--batch", type=int, default=32)
    b.add_argument("--out", required=True)
    b.set_defaults(fn=cmd_lut_build)

    s = sub.add_parser("search", help="run a search")
    s.add_argument("--config")
    s.add_argument("--lut")
    s.add_argument("--objective", choices=["ours", "c1", "c2"], default="ours")
    s.add_argument("--target-ms", type=float, default=8.0)
    s.add_argument("--lambda1", type=float, default=0.1)
    s.add_argument("--lambda2", type=float, default=0.6)
    s.add_argument("--epochs", type=int, default=40)
    s.add_argument("--warmup", type=int, default=10)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--second-path", default="random",
                   choices=["random", "gumbel", "min-alpha", "max-alpha", "none"])
    s.add_argument("--depth-space", default="sink", choices=["sink", "skip-in", "skip-out"])
    s.add_argument("--lat-weighting", default="suffix", choices=["direct", "suffix"])
    s.add_argument("--no-elastic", action="store_true")
    s.add_argument("--data-spec")
    s.add_argument("--metrics-out")
    s.add_argument("--arch-out")
    s.add_argument("--run-dir")
    s.set_defaults(fn=cmd_search)

    pl = sub.add_parser("plan", help="elasticity-scale an exported architecture")
    pl.add_argument("--arch", required=True)
    pl.add_argument("--lut", required=True)
    pl.add_argument("--target-ms", type=float, required=True)
    pl.add_argument("--out")
    pl.set_defaults(fn=cmd_plan)

    d = sub.add_parser("derive", help="derive an architecture from a saved run")
    d.add_argument("--state", required=True)
    d.add_argument("--out", required=True)
    d.set_defaults(fn=cmd_derive)

    t = sub.add_parser("train", help="train a derived architecture from scratch")
    t.add_argument("--arch", required=True)
    t.add_argument("--data-spec")
    t.add_argument("--lut")
    t.add_argument("--epochs", type=int, default=60)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--report")
    t.set_defaults(fn=cmd_train)

    e = sub.add_parser("eval", help="latency and cost of an architecture")
    e.add_argument("--arch", required=True)
    e.add_argument("--lut", required=True)
    e.set_defaults(fn=cmd_eval)

    ab = sub.add_parser("ablate", help="run an ablation grid")
    ab.add_argument("--axis", required=True,
                    choices=["second_path", "depth_space", "objective", "lambda1",
                             "elastic_on_off"])
    ab.add_argument("--values", required=True)
    ab.add_argument("--seeds", required=True)
    ab.add_argument("--config")
    ab.add_argument("--lut")
    ab.add_argument("--target-ms", type=float, default=8.0)
    ab.add_argument("--epochs", type=int, default=40)
    ab.add_argument("--warmup", type=int, default=10)
    ab.add_argument("--eval-epochs", type=int, default=30)
    ab.add_argument("--data-spec")
    ab.add_argument("--jobs", type=int, default=1)
    ab.add_argument("--out", required=True)
    ab.set_defaults(fn=cmd_ablate)

    m = sub.add_parser("metrics", help="metrics files").add_subparsers(dest="m_cmd", required=True)
    me = m.add_parser("export", help="write a run's metrics as CSV")
    me.add_argument("--run", required=True)
    me.add_argument("--out", required=True)
    me.set_defaults(fn=cmd_metrics_export)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        args.fn(args)
    except (TFNASError, OSError) as e:
        print(f"tfnas: error: {e}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
