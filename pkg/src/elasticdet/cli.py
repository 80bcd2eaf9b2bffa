"""Command-line entry points: datagen, train, search, bench, eval.

Every run is seeded, writes its outputs under --out-dir, and records a
manifest (command, resolved config, seed, input/output digests, version)
sufficient to reproduce it. Exit codes: 0 ok, 1 failure, 2 partial failure.
"""

import argparse
import json
import sys
from pathlib import Path

import numpy as np
import torch

from . import __version__
from .errors import InvalidConfigError
from .model.archive import artifact_digest, load_weights, save_weights
from .model.config import ModelConfig
from .model.network import ArchConfig, ElasticWeights
from .nas import SearchSpace, flops_latency_proxy, grid_search, read_space_file

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_PARTIAL = 2


def _write_manifest(out_dir: Path, command: str, args: dict, seed: int,
                    inputs: dict[str, str], outputs: dict[str, str]) -> None:
    manifest = {
        "command": command,
        "config": args,
        "seed": seed,
        "inputs": inputs,
        "outputs": outputs,
        "version": __version__,
    }
    with open(out_dir / "manifest.json", "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)


def _prepare_out_dir(path: str) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_dataset(path: str):
    from .datasynth import read_coco

    root = Path(path)
    json_path = root / "annotations.json" if root.is_dir() else root
    images_dir = root / "images" if root.is_dir() else None
    if images_dir is not None and not images_dir.exists():
        images_dir = None
    return read_coco(json_path, images_dir)


def cmd_datagen(args: argparse.Namespace) -> int:
    from .datasynth import DatasetSpec, generate_dataset, write_coco

    out = _prepare_out_dir(args.out_dir)
    spec = DatasetSpec(
        num_images=args.num_images,
        image_size=args.image_size,
        objects_per_image=(args.min_objects, args.max_objects),
        seed=args.seed,
    )
    dataset = generate_dataset(spec)
    json_path = out / "annotations.json"
    write_coco(dataset, json_path, out / "images")
    _write_manifest(out, "datagen", vars(args) | {"spec": spec.__dict__ | {"classes": list(spec.classes)}},
                    args.seed, {}, {"annotations.json": artifact_digest(json_path)})
    print(f"wrote {len(dataset)} images to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    from .training import (
        TrainerConfig, build_train_state, dataset_to_samples, ema_weights,
        load_checkpoint, save_checkpoint, train,
    )

    out = _prepare_out_dir(args.out_dir)
    with open(args.config) as f:
        run_cfg = json.load(f)

    trainer = TrainerConfig.from_dict(run_cfg["trainer"] | {"seed": args.seed})
    space = SearchSpace.from_dict(run_cfg["space"])
    dataset = _load_dataset(run_cfg["dataset"])
    samples = dataset_to_samples(dataset)

    if args.resume:
        state = load_checkpoint(args.resume)
    else:
        torch.manual_seed(args.seed)
        arch = ArchConfig.from_dict(run_cfg.get("arch", {}) | {"num_classes": len(dataset.class_names)})
        state = build_train_state(ElasticWeights(arch), space, trainer)

    state = train(state, samples, checkpoint_dir=out if trainer.checkpoint_every else None)

    log_path = out / "train_log.jsonl"
    with open(log_path, "w") as f:
        for record in state.log:
            f.write(json.dumps({
                "step": record.step, "loss": record.loss, "config": record.config,
                "breakdown": record.breakdown, "lr_by_group": record.lr_by_group,
                "augment_policy": record.augment_policy,
            }) + "\n")

    checkpoint_path = out / "final.ckpt"
    save_checkpoint(checkpoint_path, state)

    default_config = run_cfg.get("default_config")
    if default_config is None:
        from .nas import enumerate_space
        default_config = enumerate_space(space, mask_head_enabled=state.weights.arch.mask_head)[-1].to_dict()
    artifact_path = out / "artifact.pt"
    save_weights(
        artifact_path, ema_weights(state), space,
        default_config=ModelConfig.from_dict(default_config),
        meta={"trainer": trainer.to_dict(), "steps": state.step, "seed": args.seed},
    )
    _write_manifest(out, "train", run_cfg, args.seed,
                    {"config": artifact_digest(args.config)},
                    {"artifact.pt": artifact_digest(artifact_path),
                     "final.ckpt": artifact_digest(checkpoint_path)})
    print(f"trained {state.step} steps; artifact at {artifact_path}")
    return EXIT_OK


def cmd_search(args: argparse.Namespace) -> int:
    from .benchkit import BenchProtocol, make_measured_latency_source

    out = _prepare_out_dir(args.out_dir)
    weights, trained_space, meta = load_weights(args.weights)
    space = read_space_file(args.space) if args.space else trained_space
    dataset = _load_dataset(args.dataset)

    if args.latency == "measured":
        protocol = BenchProtocol(buffer_ms=args.buffer_ms, warmup_iters=args.warmup, measure_iters=args.iters)
        latency_source = make_measured_latency_source(protocol, seed=args.seed)
    else:
        latency_source = flops_latency_proxy

    report = grid_search(weights, space, dataset, latency_source,
                         mask_head_enabled=args.masks and weights.arch.mask_head)
    report.write_json(out / "report.json")
    report.write_csv(out / "report.csv")
    plot_path = out / "pareto.png"
    _plot_frontier(report, plot_path)
    _write_manifest(out, "search", {"space": space.to_dict(), "latency": args.latency},
                    args.seed, {"weights": artifact_digest(args.weights)},
                    {"report.json": artifact_digest(out / "report.json"),
                     "pareto.png": artifact_digest(plot_path)})
    print(f"evaluated {len(report.points)} configs "
          f"({len(report.errors)} failed); frontier size {len(report.frontier)}")
    return EXIT_PARTIAL if report.errors else EXIT_OK


def _plot_frontier(report, path: Path) -> None:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, ax = plt.subplots(figsize=(6, 4.5))
    lats = [p.latency_ms for p in report.points]
    accs = [p.accuracy for p in report.points]
    ax.scatter(lats, accs, s=18, color="#9aa3ab", label="evaluated configs")
    frontier = [report.points[i] for i in report.frontier]
    ax.plot([p.latency_ms for p in frontier], [p.accuracy for p in frontier],
            marker="o", color="#d4500f", label="Pareto frontier")
    ax.set_xlabel("latency (ms)")
    ax.set_ylabel("AP")
    ax.legend()
    fig.tight_layout()
    fig.savefig(path, metadata={"Software": None})
    plt.close(fig)


def cmd_bench(args: argparse.Namespace) -> int:
    from .benchkit import BenchProtocol, TelemetryTrace, bench_artifact

    out = _prepare_out_dir(args.out_dir)
    protocol = BenchProtocol(buffer_ms=args.buffer_ms, warmup_iters=args.warmup, measure_iters=args.iters)
    telemetry = None
    if args.telemetry:
        with open(args.telemetry) as f:
            raw = json.load(f)
        telemetry = TelemetryTrace(timestamps=np.array(raw["timestamps"]), values=np.array(raw["values"]))
    dataset = _load_dataset(args.dataset)
    config = ModelConfig.from_dict(json.loads(args.config)) if args.config else None
    result = bench_artifact(args.artifact, dataset, protocol, config=config, telemetry=telemetry)

    payload = result.latency.to_dict()
    payload["eval"] = result.eval_result.to_dict()
    report_path = out / "latency_report.json"
    with open(report_path, "w") as f:
        json.dump(payload, f, indent=2)
    _write_manifest(out, "bench", {"protocol": payload["protocol"]}, args.seed,
                    {"artifact": result.digest},
                    {"latency_report.json": artifact_digest(report_path)})
    print(f"mean {result.latency.mean_ms:.2f} ms over {protocol.measure_iters} iters, "
          f"min gap {result.latency.min_gap_ms:.1f} ms, digest {result.digest[:12]}")
    return EXIT_OK


def _parse_overrides(pairs: list[str]) -> list[dict]:
    """--set key=v1[,v2...] repeated; returns the cartesian sweep."""
    import itertools

    keys, value_lists = [], []
    for pair in pairs:
        if "=" not in pair:
            raise InvalidConfigError(f"override {pair!r} is not key=value")
        key, _, raw = pair.partition("=")
        values = []
        for token in raw.split(","):
            token = token.strip()
            if token.lower() in ("true", "false"):
                values.append(token.lower() == "true")
            else:
                values.append(int(token))
        keys.append(key.strip())
        value_lists.append(values)
    return [dict(zip(keys, combo)) for combo in itertools.product(*value_lists)]


def cmd_eval(args: argparse.Namespace) -> int:
    from .evalkit import evaluate_config

    out = _prepare_out_dir(args.out_dir)
    weights, _space, meta = load_weights(args.artifact)
    base = meta.get("default_config")
    if base is None:
        raise InvalidConfigError("artifact stores no default config; use --set to define one")
    dataset = _load_dataset(args.dataset)

    results = []
    override_sets = _parse_overrides(args.set) if args.set else [{}]
    for overrides in override_sets:
        cfg = ModelConfig.from_dict(base.to_dict() | overrides)
        weights.validate_config(cfg)
        result = evaluate_config(weights, cfg, dataset, iou_kind="mask" if args.masks else "box")
        results.append({"config": cfg.to_dict(), "result": result.to_dict()})

    results_path = out / "eval_results.json"
    with open(results_path, "w") as f:
        json.dump(results, f, indent=2)
    _write_manifest(out, "eval", {"overrides": args.set or []}, args.seed,
                    {"artifact": artifact_digest(args.artifact)},
                    {"eval_results.json": artifact_digest(results_path)})
    for entry in results:
        cfg = entry["config"]
        print(f"res={cfg['resolution']} patch={cfg['patch_size']} win={cfg['num_windows']} "
              f"dec={cfg['num_decoder_layers']} q={cfg['num_queries']} "
              f"-> AP {entry['result']['ap']:.4f} AP50 {entry['result']['ap50']:.4f}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="elasticdet")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out-dir", default="out")

    p = sub.add_parser("datagen", help="generate a synthetic shapes dataset")
    common(p)
    p.add_argument("--num-images", type=int, default=100)
    p.add_argument("--image-size", type=int, default=96)
    p.add_argument("--min-objects", type=int, default=1)
    p.add_argument("--max-objects", type=int, default=3)

    p = sub.add_parser("train", help="weight-sharing training run")
    common(p)
    p.add_argument("--config", required=True, help="JSON run config")
    p.add_argument("--resume", default=None, help="checkpoint to resume from")

    p = sub.add_parser("search", help="grid search and Pareto frontier")
    common(p)
    p.add_argument("--weights", required=True)
    p.add_argument("--space", default=None, help="space JSON; defaults to the trained space")
    p.add_argument("--dataset", required=True)
    p.add_argument("--latency", choices=("flops", "measured"), default="flops")
    p.add_argument("--buffer-ms", type=float, default=200.0)
    p.add_argument("--warmup", type=int, default=2)
    p.add_argument("--iters", type=int, default=5)
    p.add_argument("--masks", action="store_true")

    p = sub.add_parser("bench", help="same-artifact accuracy + latency")
    common(p)
    p.add_argument("--artifact", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--buffer-ms", type=float, default=200.0)
    p.add_argument("--warmup", type=int, default=3)
    p.add_argument("--iters", type=int, default=10)
    p.add_argument("--telemetry", default=None, help="JSON telemetry trace")
    p.add_argument("--config", default=None, help="inline JSON model config")

    p = sub.add_parser("eval", help="evaluate with config overrides")
    common(p)
    p.add_argument("--artifact", required=True)
    p.add_argument("--dataset", required=True)
    p.add_argument("--set", action="append", metavar="KEY=V1[,V2...]",
                   help="config override; comma lists sweep the values")
    p.add_argument("--masks", action="store_true")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {
        "datagen": cmd_datagen,
        "train": cmd_train,
        "search": cmd_search,
        "bench": cmd_bench,
        "eval": cmd_eval,
    }
    try:
        return handlers[args.command](args)
    except Exception as exc:  # noqa: BLE001 - CLI boundary
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_FAILURE


if __name__ == "__main__":
    sys.exit(main())
