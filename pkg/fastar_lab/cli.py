"""Command-line entry point: ``fastar-lab <command> [--config run.toml] [flags]``.

Every command is reproducible from its config file and seed; CLI flags and
``--set section.key=value`` override individual keys.
"""

from __future__ import annotations

import argparse
import logging
import sys
import tomllib
from pathlib import Path
from typing import Any, Optional, Sequence

import numpy as np
from pydantic import ValidationError

from fastar_lab import costmodel, service
from fastar_lab.ar_engine import (
    FarModel,
    TrainState,
    fit,
    generate,
    measure_reconstruction,
    measure_self_consistency,
    param_dtype,
    widen_to_shortcut,
)
from fastar_lab.conditioner import flatten_grid
from fastar_lab.diffcore.rng import RngStreams
from fastar_lab.exceptions import CheckpointError, ConfigError, FastarLabError
from fastar_lab.gradcheck import DEFAULT_TOLERANCE, run_gradcheck
from fastar_lab.heads.shortcut import ShortcutHead
from fastar_lab.models import BackboneKind, CfgSchedule, HeadKind, RunConfig, SamplerSpec, TaskKind
from fastar_lab.settings import get_settings
from fastar_lab.toylab import (
    GaussianFieldSpec,
    Mixture2dSpec,
    analytic_conditional,
    energy_distance,
    moment_error,
    sample_field,
    sample_mixture,
    task_sampler,
)

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CHECK_FAILED = 1
EXIT_ERROR = 2


# Configuration


def _parse_value(raw: str) -> Any:
    try:
        return tomllib.loads(f"value = {raw}")["value"]
    except tomllib.TOMLDecodeError:
        return raw


def _set_dotted(data: dict[str, Any], key: str, value: Any) -> None:
    *parents, leaf = key.split(".")
    node = data
    for part in parents:
        node = node.setdefault(part, {})
        if not isinstance(node, dict):
            raise ConfigError(f"Cannot override {key}: {part} is not a section")
    node[leaf] = value


def load_config(path: Optional[str | Path] = None, overrides: Sequence[str] = (), **flags: Any) -> RunConfig:
    """Read a TOML run config, apply ``--set`` overrides and flag values, and validate."""
    settings = get_settings()
    data: dict[str, Any] = {"output_dir": str(settings.OUTPUT_ROOT)}
    path = path or settings.DEFAULT_CONFIG
    if path is not None:
        try:
            data.update(tomllib.loads(Path(path).read_text()))
        except FileNotFoundError as exc:
            raise ConfigError(f"Config file not found: {path}") from exc
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"Config file {path} is not valid TOML: {exc}") from exc
    for item in overrides:
        key, sep, raw = item.partition("=")
        if not sep:
            raise ConfigError(f"Override {item!r} is not of the form section.key=value")
        _set_dotted(data, key.strip(), _parse_value(raw.strip()))
    for key, value in flags.items():
        if value is not None:
            _set_dotted(data, key, value)
    try:
        return RunConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(f"Invalid run config: {exc}") from exc


def run_dir(config: RunConfig, head_kind: HeadKind | None = None) -> Path:
    name = config.run_id if head_kind is None else f"{config.run_id}-{head_kind}"
    return Path(config.output_dir) / name


def _resolve_checkpoint(location: Path) -> Path:
    if location.is_dir():
        return service.latest_checkpoint(location)
    if not location.exists():
        raise CheckpointError(f"Checkpoint not found: {location}")
    return location


def load_model(config: RunConfig, location: Path) -> tuple[FarModel, dict[str, np.ndarray], dict[str, Any]]:
    """Model, sampling parameters (EMA unless disabled) and checkpoint metadata."""
    state, meta = service.load_checkpoint(_resolve_checkpoint(location), config.optim)
    model = FarModel.from_config(config, HeadKind(meta.get("headkind", config.head_kind)))
    params = state.ema.shadow if config.generation.use_ema else state.params
    return model, params, meta


def _labels(config: RunConfig, count: int) -> np.ndarray:
    if config.generation.labels:
        return np.resize(np.asarray(config.generation.labels, dtype=np.int64), count)
    return np.arange(count) % config.task.num_classes


def _reference(
    config: RunConfig, rng: np.random.Generator, labels: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Exact task samples matching ``labels`` plus the target mean and covariance (flattened)."""
    if config.task.kind == TaskKind.GAUSSIAN_FIELD:
        spec = GaussianFieldSpec.from_config(config.task.gaussian_field)
        return flatten_grid(sample_field(spec, rng, labels.size)).reshape(labels.size, -1), spec.mean, spec.covariance
    spec = Mixture2dSpec.from_config(config.task.mixture2d)
    if spec.conditional:
        points, _ = sample_mixture(spec, rng, labels.size, labels=labels)
        mean, cov = spec.moments(int(labels[0])) if np.all(labels == labels[0]) else spec.moments()
    else:
        points, _ = sample_mixture(spec, rng, labels.size)
        mean, cov = spec.moments()
    return points, mean, cov


# Commands


def cmd_gradcheck(config: RunConfig, tolerance: float = DEFAULT_TOLERANCE) -> int:
    """Finite-difference check of every primitive, layer and loss; non-zero exit on any failure."""
    comments = [f"tolerance {tolerance:g}", "max elementwise relative error, fourth-order central differences"]
    with service.run_directory(run_dir(config)) as out:
        rows = run_gradcheck(seed=config.seed, tolerance=tolerance)
        table = service.build_table(rows, service.GRADCHECK_COLUMNS)
        service.write_csv(out / "gradcheck.csv", table, comments=comments)
    failed = [row["check"] for row in rows if not row["passed"]]
    if failed:
        logger.error("Gradient check failed for: %s", ", ".join(failed))
        return EXIT_CHECK_FAILED
    logger.info("All %d gradient checks passed (max error %.2e)", len(rows), max(row["max_rel_error"] for row in rows))
    return EXIT_OK


def cmd_train(config: RunConfig, progress: bool = False) -> Path:
    """Train from scratch; writes checkpoints, ``losses.csv`` and ``manifest.json`` to the run directory."""
    streams = RngStreams(config.seed)
    two_stage = config.head_kind == HeadKind.FM_TO_SHORTCUT and config.train.pretrain_steps > 0
    head_kind = HeadKind.FLOW_MATCHING if two_stage else config.head_kind
    model = FarModel.from_config(config, head_kind)
    state = TrainState.create(model.init(streams.stream("init"), param_dtype(config.precision)), config.optim)
    sampler = task_sampler(config.task)
    columns = service.LOSS_COLUMNS[config.head_kind]
    reports: list[dict[str, float]] = []
    checkpoints: list[str] = []
    heldout = sampler(streams.stream("heldout"), config.train.heldout_size)

    with service.run_directory(run_dir(config)) as out:
        stages = [(model, config.train.steps)]
        if two_stage:
            stages = [(model, config.train.pretrain_steps), (None, config.train.steps)]
        for stage_model, steps in stages:
            if stage_model is None:
                model, state = widen_to_shortcut(model, state, config, streams.stream("widen"))
                logger.info("Switched to the shortcut objective at step %d", state.step)
            for state, report in fit(model, state, config, sampler, streams, steps, progress=progress):
                reports.append(report)
                if state.step % config.train.log_every == 0:
                    if "self_consist" in columns and isinstance(model.head, ShortcutHead):
                        report["self_consist"] = measure_self_consistency(
                            model, state.ema.shadow, *heldout, streams.stream("heldout", "path")
                        )
                    logger.info("step %d loss %.5f grad_norm %.3f", state.step, report["loss"], report["grad_norm"])
                if state.step % config.train.checkpoint_every == 0:
                    checkpoints.append(str(service.save_checkpoint(out, state, config, model.head_kind)))
        if not checkpoints or not checkpoints[-1].endswith(service.checkpoint_path(out, state.step).name):
            checkpoints.append(str(service.save_checkpoint(out, state, config, model.head_kind)))

        service.write_csv(out / "losses.csv", service.build_table(service.loss_rows(reports, columns), columns))
        manifest = service.new_manifest(
            "train",
            config,
            checkpoint_id=service.checkpoint_id(config.run_id, state.step),
            steps=state.step,
            outputs=["losses.csv", *checkpoints],
        )
        service.write_manifest(out / "manifest.json", manifest)
    return out


def cmd_sample(config: RunConfig, checkpoint: Optional[Path] = None) -> Path:
    """Generate ``generation.num_samples`` grids from a checkpoint; writes ``samples.csv`` and a manifest."""
    out = run_dir(config)
    model, params, meta = load_model(config, checkpoint or out)
    gen = config.generation
    labels = _labels(config, gen.num_samples)
    result = generate(
        model,
        params,
        labels,
        gen.ar_iters,
        gen.sampler,
        gen.cfg,
        RngStreams(config.seed).stream("sample"),
        chunk_size=gen.chunk_size,
    )
    rows, columns = service.grid_rows(result.tokens, labels, config.task.grid_shape[1])
    with service.run_directory(out / "samples"):
        path = service.write_csv(out / "samples" / "samples.csv", service.build_table(rows, columns))
        manifest = service.new_manifest(
            "sample",
            config,
            checkpoint_id=meta.get("ckptid"),
            ar_iters=gen.ar_iters,
            steps=gen.steps,
            cfg_weight=gen.cfg_weight,
            outputs=[str(path)],
        )
        service.write_manifest(out / "samples" / "manifest.json", manifest)
    logger.info("Generated %d samples with %d head calls", labels.size, result.counter.token_steps)
    return path


def cmd_ablate_steps(config: RunConfig) -> Path:
    """Energy distance and moment errors per (head kind, sampling steps) from one trained run per head kind."""
    streams = RngStreams(config.seed)
    gen, ablation = config.generation, config.ablation
    labels = _labels(config, ablation.samples)
    reference, mean, cov = _reference(config, streams.stream("ablate", "reference"), labels)
    rows = []
    with service.run_directory(run_dir(config)) as out:
        for kind in ablation.head_kinds:
            location = Path(ablation.checkpoints.get(str(kind), run_dir(config, kind)))
            model, params, _ = load_model(config, location)
            for steps in ablation.steps_list:
                result = generate(
                    model,
                    params,
                    labels,
                    gen.ar_iters,
                    SamplerSpec(steps=steps),
                    CfgSchedule(),
                    streams.stream("ablate", str(kind), steps),
                    chunk_size=gen.chunk_size,
                )
                samples = result.tokens.reshape(labels.size, -1)
                report = moment_error(samples, mean, cov)
                report.energy_distance = energy_distance(samples, reference)
                rows.append({"head_kind": str(kind), "N": steps, **report.model_dump(exclude={"n_reference"})})
                logger.info("%s N=%d energy distance %.4f", kind, steps, report.energy_distance)
        return service.write_csv(out / "ablate_steps.csv", service.build_table(rows, service.ABLATION_COLUMNS))


def cmd_ablate_cfg(config: RunConfig) -> Path:
    """Energy distance per (guidance weight, AR iterations, sampling steps) for one trained run."""
    streams = RngStreams(config.seed)
    gen, ablation = config.generation, config.ablation
    labels = _labels(config, ablation.samples)
    reference, _, _ = _reference(config, streams.stream("ablate-cfg", "reference"), labels)
    rows = []
    with service.run_directory(run_dir(config)) as out:
        model, params, _ = load_model(config, out)
        for weight in ablation.cfg_weights:
            for ar_iters in ablation.cfg_ar_iters:
                for steps in ablation.cfg_steps:
                    rng = streams.stream("ablate-cfg", int(round(weight * 1000)), ar_iters, steps)
                    cfg = CfgSchedule(weight=weight, kind=gen.cfg_schedule)
                    k, sampler = min(ar_iters, model.tokens), SamplerSpec(steps=steps)
                    result = generate(model, params, labels, k, sampler, cfg, rng, chunk_size=gen.chunk_size)
                    distance = energy_distance(result.tokens.reshape(labels.size, -1), reference)
                    row = {"cfg_weight": weight, "K": ar_iters, "N": steps}
                    rows.append({**row, "energy_distance": distance, "n_samples": labels.size})
        return service.write_csv(out / "ablate_cfg.csv", service.build_table(rows, service.CFG_COLUMNS))


def cmd_ablate_kl(config: RunConfig, progress: bool = False) -> Path:
    """Train one C-VAE per KL weight from the same initialisation and data; held-out reconstruction per weight."""
    streams = RngStreams(config.seed)
    sampler = task_sampler(config.task)
    tokens, labels = sampler(streams.stream("heldout"), config.train.heldout_size)
    rows = []
    with service.run_directory(run_dir(config)) as out:
        for weight in config.ablation.kl_weights:
            weighted = config.model_copy(
                update={"head_kind": HeadKind.CVAE, "cvae": config.cvae.model_copy(update={"kl_weight": weight})}
            )
            model = FarModel.from_config(weighted)
            state = TrainState.create(model.init(streams.stream("init"), param_dtype(config.precision)), config.optim)
            for state, report in fit(model, state, weighted, sampler, streams, config.train.steps, progress=progress):
                if state.step % config.train.log_every == 0:
                    logger.debug("kl_weight %g step %d loss %.5f", weight, state.step, report["loss"])
            params = state.ema.shadow if config.generation.use_ema else state.params
            report = measure_reconstruction(model, params, tokens, labels, streams.stream("heldout", "eps"))
            rows.append({"kl_weight": weight, "steps": state.step, **report})
            logger.info("kl_weight %g: recon %.5f kl %.4f", weight, report["recon"], report["kl"])
        return service.write_csv(out / "ablate_kl.csv", service.build_table(rows, service.KL_COLUMNS))


def cost_report(config: RunConfig) -> tuple[list[dict[str, Any]], list[str]]:
    """Cost grid rows at the documented head width and at the calibrated one, with header comments."""
    cost = config.cost
    archs = [costmodel.preset(name) for name in cost.archs]
    reference = costmodel.preset("mar-b")
    width = costmodel.calibrate_head_width(reference, 64, 100, cost.target_share)
    calibrated = [arch.with_head_width(width).model_copy(update={"arch_id": f"{arch.arch_id}-cal"}) for arch in archs]
    breakdowns = costmodel.cost_grid(archs + calibrated, cost.ar_iters, cost.denoise_steps)
    rows = [
        {
            "arch_id": b.arch_id,
            "K": b.ar_iters,
            "O": b.denoise_steps,
            "kv_cache": b.kv_cache,
            "backbone_flops": b.backbone_flops,
            "head_flops": b.head_flops,
            "head_calls": b.head_calls,
            "head_share": b.head_share,
        }
        for b in breakdowns
    ]
    comments = [costmodel.FLOP_CONVENTION, f"head width {costmodel.DOCUMENTED_HEAD_WIDTH} (documented assumption)"]
    comments.append(f"head width {width} for '-cal' rows (mar-b head share {cost.target_share:g} at K=64, O=100)")
    for label, arch in (("documented", reference), ("calibrated", reference.with_head_width(width))):
        ratio = costmodel.speedup(costmodel.breakdown(arch, 64, 8), costmodel.breakdown(arch, 64, 100))
        comments.append(f"speedup O=8 over O=100 at K=64, {label} width: {ratio:.2f}")
    comments.extend(costmodel.reference_comments(cost.target_share, calibrated_width=width))
    return rows, comments


def cmd_cost(config: RunConfig) -> Path:
    """Analytic (K, O, kv_cache) cost grid for the configured architecture presets."""
    rows, comments = cost_report(config)
    for line in comments:
        logger.info(line)
    table = service.build_table(rows, service.COST_COLUMNS)
    with service.run_directory(run_dir(config)) as out:
        return service.write_csv(out / "cost.csv", table, comments=comments)


def cmd_oracle(config: RunConfig, untrained: bool = False) -> Path:
    """Clamp random tokens of the Gaussian field and compare generated conditional moments with the exact ones."""
    if config.task.kind != TaskKind.GAUSSIAN_FIELD or config.backbone.kind != BackboneKind.MASKED:
        raise ConfigError("the oracle needs the gaussian-field task and a masked backbone")
    streams = RngStreams(config.seed)
    gen, oracle = config.generation, config.oracle
    with service.run_directory(run_dir(config)) as out:
        if untrained:
            model = FarModel.from_config(config)
            params = model.init(streams.stream("init"), param_dtype(config.precision))
        else:
            model, params, _ = load_model(config, out)
        spec = GaussianFieldSpec.from_config(config.task.gaussian_field)
        total, token_dim = spec.tokens, spec.token_dim
        n_known = min(total - 1, max(1, int(round(oracle.clamp_fraction * total))))
        rows = []
        for pattern in range(oracle.clamp_patterns):
            rng = streams.stream("oracle", "pattern", pattern)
            known_positions = np.sort(rng.choice(total, size=n_known, replace=False))
            field = flatten_grid(sample_field(spec, rng, 1))[0]
            conditional = analytic_conditional(spec, known_positions, field[known_positions])
            known_mask = np.zeros(total, dtype=bool)
            known_mask[known_positions] = True

            labels = np.zeros(oracle.samples, dtype=np.int64)
            result = generate(
                model,
                params,
                labels,
                gen.ar_iters,
                gen.sampler,
                gen.cfg,
                streams.stream("oracle", "model", pattern),
                chunk_size=gen.chunk_size,
                known=field,
                known_mask=known_mask,
            )
            generated = result.tokens[:, conditional.masked_positions].reshape(oracle.samples, -1)
            exact = conditional.sample(streams.stream("oracle", "exact", pattern), oracle.samples)
            positions = " ".join(str(p) for p in known_positions)
            for source, samples in (("model", generated), ("oracle", exact)):
                report = moment_error(samples, conditional.mean, conditional.covariance)
                rows.append(
                    {
                        "pattern": pattern,
                        "source": source,
                        "N": gen.steps,
                        "known_positions": positions,
                        **report.model_dump(include={"mean_error", "cov_error", "n_samples"}),
                    }
                )
            logger.info(
                "pattern %d: model mean error %.4f (%d clamped of %d, token_dim %d)",
                pattern,
                rows[-2]["mean_error"],
                n_known,
                total,
                token_dim,
            )
        return service.write_csv(out / "oracle.csv", service.build_table(rows, service.ORACLE_COLUMNS))


def cmd_serve(host: Optional[str] = None, port: Optional[int] = None) -> int:
    import uvicorn

    settings = get_settings()
    uvicorn.run("fastar_lab.main:app", host=host or settings.API_HOST, port=port or settings.API_PORT)
    return EXIT_OK


# Argument parsing


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fastar-lab", description="Few-step autoregressive token generation lab.")
    parser.add_argument("--log-level", default=None, help="Logging level (default from FASTAR_LAB_LOG_LEVEL)")
    parser.add_argument("--quiet", action="store_true", help="Disable progress bars")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name: str, help_text: str) -> argparse.ArgumentParser:
        command = sub.add_parser(name, help=help_text)
        command.add_argument("--config", type=Path, default=None, help="TOML run config")
        command.add_argument("--seed", type=int, default=None)
        command.add_argument("--out", type=Path, default=None, help="Output root (run directory is <out>/<run_id>)")
        command.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="Override a dotted config key",
        )
        command.add_argument("--head", choices=[k.value for k in HeadKind], default=None)
        command.add_argument("--backbone", choices=[k.value for k in BackboneKind], default=None)
        command.add_argument(
            "--steps",
            type=int,
            default=None,
            help="Training steps (train) or sampling steps per token (other commands)",
        )
        command.add_argument("--cfg-weight", type=float, default=None)
        command.add_argument("--ar-iters", type=int, default=None)
        return command

    add("gradcheck", "Finite-difference check of every primitive, layer and loss").add_argument(
        "--tolerance", type=float, default=DEFAULT_TOLERANCE
    )
    add("train", "Train a model")
    add("sample", "Generate token grids from a checkpoint").add_argument("--checkpoint", type=Path, default=None)
    add("ablate-steps", "Sampling-step ablation across head kinds")
    add("ablate-cfg", "Guidance-weight sweep")
    add("ablate-kl", "C-VAE KL-weight sweep")
    add("cost", "Analytic inference-cost grid")
    add("oracle", "Compare conditional generation with the exact Gaussian conditional").add_argument(
        "--untrained", action="store_true", help="Use freshly initialised parameters"
    )
    serve = sub.add_parser("serve", help="Serve the analytic API")
    serve.add_argument("--host", default=None)
    serve.add_argument("--port", type=int, default=None)
    return parser


def config_from_args(args: argparse.Namespace) -> RunConfig:
    steps_key = "train.steps" if args.command in ("train", "ablate-kl") else "generation.steps"
    return load_config(
        args.config,
        args.overrides,
        **{
            "seed": args.seed,
            "output_dir": None if args.out is None else str(args.out),
            "head_kind": args.head,
            "backbone.kind": args.backbone,
            steps_key: args.steps,
            "generation.cfg_weight": args.cfg_weight,
            "generation.ar_iters": args.ar_iters,
        },
    )


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=(args.log_level or get_settings().LOG_LEVEL).upper(),
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    try:
        if args.command == "serve":
            return cmd_serve(args.host, args.port)
        config = config_from_args(args)
        match args.command:
            case "gradcheck":
                return cmd_gradcheck(config, args.tolerance)
            case "train":
                cmd_train(config, progress=not args.quiet and sys.stderr.isatty())
            case "sample":
                cmd_sample(config, args.checkpoint)
            case "ablate-steps":
                cmd_ablate_steps(config)
            case "ablate-cfg":
                cmd_ablate_cfg(config)
            case "ablate-kl":
                cmd_ablate_kl(config, progress=not args.quiet and sys.stderr.isatty())
            case "cost":
                cmd_cost(config)
            case "oracle":
                cmd_oracle(config, untrained=args.untrained)
    except FastarLabError as exc:
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_ERROR
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
