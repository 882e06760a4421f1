import logging
import math
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np

from lodslab import config
from lodslab.checkpoint import load_checkpoint, save_checkpoint
from lodslab.config import RunConfig, load_run_config, write_run_config
from lodslab.datasets import class_samples, load_dataset
from lodslab.denoiser import (
    AdapterSet,
    Condition,
    Denoiser,
    LearnableEmbedding,
    NetworkDenoiser,
    attach_adapter,
    make_analytic,
    predict_noise,
    train_denoiser,
)
from lodslab.generators import Generator, IdentityGenerator, SplatGenerator, save_image
from lodslab.gradcore import Tensor
from lodslab.metrics import MetricsWriter, write_csv, write_json
from lodslab.oracle import (
    GaussianSandbox,
    cfg_fixed_point,
    mc_fixed_point,
    median_bandwidth,
    mmd,
    sandbox_grad_fn,
)
from lodslab.priors import (
    DistillRun,
    LODSPrior,
    PriorConfig,
    State,
    cfg_combine,
    dds_grad,
    limit_grad,
    lods_run,
    make_state,
    normalized_sds_grad,
    reference_sds_grad,
    sds_grad,
    vsd_grad,
)
from lodslab.schedule import TimestepPolicy, make_schedule, sample_timestep
from lodslab.utils import ConfigError, RecipeError, keyed_rng

logger = logging.getLogger(__name__)

RECIPES = ("w-sweep", "variant-compare", "sandbox-acceptance", "editing-demo")

# sandbox distillation: learning rates of the un-preconditioned 1-D field
SANDBOX_THETA_LR = 3e-2
SANDBOX_STATE_LR = 5e-2
SANDBOX_STEPS = 3000
SANDBOX_PARTICLES = 256


# --------------------------------------------------------------- builders


def load_denoiser(cfg: RunConfig) -> Denoiser:
    settings = cfg.denoiser
    if settings.checkpoint is not None:
        d = NetworkDenoiser.from_state_dict(load_checkpoint(settings.checkpoint))
        logger.info(f"Loaded network denoiser from {settings.checkpoint}")
        return d
    if settings.kind == "network":
        logger.info("No denoiser checkpoint given; using the analytic sandbox denoiser")
    return make_analytic(
        {0: settings.mu_y}, {0: settings.var_y}, settings.mu_null, settings.var_null, cfg.schedule.build()
    )


def build_generator(cfg: RunConfig, data_dim: int) -> Generator:
    g = cfg.generator
    if g.kind == "identity":
        return IdentityGenerator((g.particles, data_dim), init_scale=g.init_scale)
    gen = SplatGenerator(g.width, g.height, g.channels, g.num_splats, background=g.background)
    if gen.data_dim != data_dim:
        raise ConfigError(
            f"Splat images have {gen.data_dim} values but the denoiser expects {data_dim}; "
            f"match generator width*height*channels to the training data"
        )
    return gen


def build_prior_config(cfg: RunConfig, d: Denoiser, source: Optional[np.ndarray] = None) -> PriorConfig:
    p = cfg.prior
    init = Condition(p.init_condition) if p.init_condition is not None else None
    state = make_state(d, p.variant, p.adapter_rank, p.adapter_scale, init_condition=init, seed=cfg.seed)
    return PriorConfig(
        variant=p.variant,
        w=p.w,
        condition=Condition(p.condition),
        state=state,
        policy=p.policy(),
        noise_policy=p.noise_policy,
        seed=cfg.seed,
        state_lr=p.resolved_state_lr(cfg.generator.kind),
        state_optimizer=p.state_optimizer,
        theta_lr=p.theta_lr,
        theta_optimizer=p.theta_optimizer,
        theta_momentum=p.theta_momentum,
        source=source,
        source_condition=Condition(p.source_condition) if p.source_condition is not None else None,
    )


def _run_dir(path: Union[str, Path]) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    return path


# ------------------------------------------------------------------- runs


def run_train(cfg: RunConfig, run_dir: Union[str, Path]) -> dict:
    run_dir = _run_dir(run_dir)
    ds = cfg.dataset
    data, labels = load_dataset(ds.kind, ds.size, cfg.seed, ds.spread, ds.mode_std)
    arch = cfg.denoiser
    d = NetworkDenoiser(
        cfg.schedule.build(),
        data.shape[1],
        num_classes=int(labels.max()) + 1,
        hidden_width=arch.hidden_width,
        depth=arch.depth,
        embedding_dim=arch.embedding_dim,
        time_features=arch.time_features,
        seed=cfg.seed,
    )
    t = cfg.train
    losses = train_denoiser(
        d, data, labels, t.steps, lr=t.lr, batch_size=t.batch_size, drop_prob=t.drop_prob,
        seed=cfg.seed, optimizer=t.optimizer, progress=config.PROGRESS,
    )
    save_checkpoint(run_dir / config.DENOISER_FILE, d.state_dict())
    write_csv(run_dir / config.LOSS_FILE, ({"step": i, "loss": v} for i, v in enumerate(losses)), ("step", "loss"))
    window = max(len(losses) // 20, 1)
    summary = {
        "experiment": "train",
        "dataset": ds.kind,
        "steps": len(losses),
        "initial_loss": float(np.mean(losses[:window])),
        "final_loss": float(np.mean(losses[-window:])),
        "forwards": d.forward_count,
        "backwards": d.backward_count,
    }
    write_json(run_dir / config.SUMMARY_FILE, summary)
    write_run_config(cfg, run_dir)
    return summary


def run_distill(cfg: RunConfig, run_dir: Union[str, Path]) -> DistillRun:
    run_dir = _run_dir(run_dir)
    d = load_denoiser(cfg)
    gen = build_generator(cfg, d.data_dim)
    theta0 = gen.init_theta(keyed_rng(cfg.seed, 20))
    source = gen.render(theta0).data.copy() if cfg.prior.variant == "dds" else None
    prior_cfg = build_prior_config(cfg, d, source)
    run = lods_run(prior_cfg, gen, theta0, d, cfg.prior.steps, snapshot_every=cfg.snapshot_every,
                   progress=config.PROGRESS)

    with MetricsWriter(run_dir / config.METRICS_FILE) as writer:
        writer.write_rows(run.to_rows())
    tensors = {"theta": run.theta, "theta0": theta0}
    tensors.update({f"snapshot.{step}": arr for step, arr in run.snapshots.items()})
    if prior_cfg.state is not None:
        tensors.update(prior_cfg.state.state_dict())
    save_checkpoint(run_dir / config.THETA_FILE, tensors)
    summary = run.summary()
    summary.update({
        "generator": gen.kind,
        "denoiser": d.variant,
        "theta_change": float(np.abs(run.theta - theta0).max()),
    })
    write_json(run_dir / config.SUMMARY_FILE, summary)
    write_run_config(cfg, run_dir)
    return run


def load_distilled_state(run_dir: Union[str, Path], d: Denoiser) -> Optional[State]:
    """Learnable state saved by a distillation run, rebuilt against denoiser ``d``."""
    tensors = load_checkpoint(Path(run_dir) / config.THETA_FILE)
    if "embedding" in tensors:
        return LearnableEmbedding.from_state_dict(tensors)
    if "adapter.meta" in tensors:
        if not isinstance(d, NetworkDenoiser):
            raise ConfigError("Adapter state needs the network denoiser it was trained on")
        return AdapterSet.from_state_dict(d, tensors)
    return None


def _reference_samples(cfg: RunConfig, n: int, seed: int) -> np.ndarray:
    if cfg.denoiser.checkpoint is None:
        rng = keyed_rng(seed, 30)
        mu = np.asarray(cfg.denoiser.mu_y, dtype=np.float64)
        return mu + math.sqrt(cfg.denoiser.var_y) * rng.standard_normal((n, mu.shape[0]))
    if cfg.dataset.kind != "mixture2d":
        raise ConfigError("eval compares particles against mixture2d class samples only")
    return class_samples(cfg.prior.condition, n, seed, cfg.dataset.spread, cfg.dataset.mode_std)


def evaluate_particles(particles: np.ndarray, reference: np.ndarray) -> dict:
    h = median_bandwidth(particles, reference)
    return {"mmd": mmd(particles, reference, h), "bandwidth": h, "particles": len(particles)}


def run_eval(run_dir: Union[str, Path], n: int = 1000, seed: int = 0) -> dict:
    run_dir = Path(run_dir)
    cfg = load_run_config(run_dir / config.CONFIG_FILE)
    if cfg.generator.kind != "identity":
        raise ConfigError("eval works on identity-generator runs (particles)")
    theta = load_checkpoint(run_dir / config.THETA_FILE)["theta"]
    report = evaluate_particles(theta, _reference_samples(cfg, n, seed))
    report.update({"variant": cfg.prior.variant, "w": "inf" if math.isinf(cfg.prior.w) else cfg.prior.w})
    write_json(run_dir / "eval.json", report)
    logger.info(f"eval {run_dir}: mmd={report['mmd']:.5f} (bandwidth {report['bandwidth']:.4f})")
    return report


def run_export(run_dir: Union[str, Path]) -> List[Path]:
    """Render theta snapshots to PGM/PPM (splats) or emit particles.csv (identity)."""
    run_dir = Path(run_dir)
    cfg = load_run_config(run_dir / config.CONFIG_FILE)
    tensors = load_checkpoint(run_dir / config.THETA_FILE)
    snapshots = {int(k.split(".", 1)[1]): v for k, v in tensors.items() if k.startswith("snapshot.")}
    snapshots.setdefault(cfg.prior.steps, tensors["theta"])
    written: List[Path] = []
    if cfg.generator.kind == "splats":
        g = cfg.generator
        gen = SplatGenerator(g.width, g.height, g.channels, g.num_splats, background=g.background)
        image_dir = _run_dir(run_dir / "images")
        for step in sorted(snapshots):
            written.append(save_image(gen.render(snapshots[step]), image_dir / f"step_{step:06d}"))
    else:
        dim = tensors["theta"].shape[-1]
        header = ("step", "particle") + tuple(f"x{i}" for i in range(dim))
        rows = (
            dict(zip(header, (step, p, *map(float, snapshots[step][p]))))
            for step in sorted(snapshots)
            for p in range(len(snapshots[step]))
        )
        written.append(write_csv(run_dir / "particles.csv", rows, header))
    logger.info(f"Exported {len(written)} file(s) from {run_dir}")
    return written


# ---------------------------------------------------------------- recipes


def sandbox_distill(
    variant: str,
    w: float,
    steps: int = SANDBOX_STEPS,
    particles: int = SANDBOX_PARTICLES,
    seed: int = 0,
    sb: Optional[GaussianSandbox] = None,
) -> DistillRun:
    """Distil the equal-variance sandbox into a cloud of 1-D particles."""
    sb = sb or GaussianSandbox([1.0], 1.0, [0.0], 1.0)
    d = sb.denoiser()
    state = LearnableEmbedding.from_null(d) if variant == "lods_embedding" else None
    cfg = PriorConfig(
        variant=variant, w=w, condition=sb.condition, state=state, seed=seed,
        state_lr=SANDBOX_STATE_LR, state_optimizer="sgd", theta_lr=SANDBOX_THETA_LR,
    )
    gen = IdentityGenerator((particles, sb.dim))
    return lods_run(cfg, gen, gen.init_theta(keyed_rng(seed, 20)), d, steps)


def _verdict(ok: bool) -> str:
    return "pass" if ok else "fail"


def w_sweep(seed: int = 0, steps: int = SANDBOX_STEPS, n: int = 100_000,
            weights=(30.0, 100.0, 1000.0, math.inf)) -> List[dict]:
    sb = GaussianSandbox([1.0], 1.0, [0.0], 1.0)
    mu_y = float(sb.mu_y[0])
    rows = []
    for w in weights:
        row = {"w": w}
        if math.isfinite(w):
            analytic = float(cfg_fixed_point(sb, w)[0])
            half = 10.0 + abs(analytic)
            mc = mc_fixed_point(sandbox_grad_fn(sb, "sds", w), analytic - half, analytic + half, n, seed,
                                sb.schedule, TimestepPolicy())
            row.update({"sds_fixed_point": analytic, "sds_fixed_point_mc": mc,
                        "sds_verdict": _verdict(abs(mc - analytic) <= 0.05)})
        else:
            row.update({"sds_fixed_point": math.inf, "sds_fixed_point_mc": None, "sds_verdict": "n/a"})
        lods = float(sandbox_distill("lods_embedding", w, steps=steps, seed=seed).theta.mean())
        row.update({"lods_final_mean": lods, "lods_verdict": _verdict(abs(lods - mu_y) <= 0.1)})
        rows.append(row)
        logger.info(f"w-sweep w={w}: {row}")
    return rows


def variant_compare(checkpoint: Optional[str], seed: int = 0, steps: int = 3000, w: float = 100.0,
                    particles: int = 256, n_ref: int = 2000) -> List[dict]:
    """SDS against embedding LODS on a trained 2-D mixture denoiser, scored by MMD."""
    if checkpoint is None or not Path(checkpoint).is_file():
        raise RecipeError(
            f"variant-compare needs a trained mixture2d checkpoint (got {checkpoint}); "
            f"run `lodslab train --data mixture2d` first"
        )
    rows = []
    reference = class_samples(0, n_ref, seed)
    for variant in ("sds", "lods_embedding"):
        cfg = config.build_run_config({
            "seed": seed,
            "denoiser": {"checkpoint": str(checkpoint)},
            "prior": {"variant": variant, "w": w, "steps": steps},
            "generator": {"kind": "identity", "particles": particles},
        })
        d = load_denoiser(cfg)
        gen = build_generator(cfg, d.data_dim)
        run = lods_run(build_prior_config(cfg, d), gen, gen.init_theta(keyed_rng(seed, 20)), d, steps)
        row = {"variant": variant, "w": w, "steps": steps, **evaluate_particles(run.theta, reference),
               "forwards": run.forwards, "backwards": run.backwards}
        rows.append(row)
        logger.info(f"variant-compare {variant}: mmd={row['mmd']:.5f}")
    return rows


def _max_abs(a, b) -> float:
    return float(np.max(np.abs(np.asarray(a) - np.asarray(b))))


def sandbox_acceptance(seed: int = 0, draws: int = 50) -> List[dict]:
    """Property checks of the prior zoo on an untrained network and the Gaussian sandbox."""
    schedule = make_schedule()
    net = NetworkDenoiser(schedule, data_dim=2, num_classes=2, hidden_width=32, seed=seed)
    net.freeze()
    null_state = LearnableEmbedding.from_null(net)
    y = Condition(0)
    checks: List[dict] = []

    def check(name, value, tol, exact=False):
        ok = value == 0.0 if exact else value <= tol
        checks.append({"check": name, "value": value, "tolerance": 0.0 if exact else tol, "verdict": _verdict(ok)})

    worst = {"scaling": 0.0, "alignment": 0.0, "collapse": 0.0, "uncond": 0.0, "dds": 0.0, "limit": 0.0}
    for i in range(draws):
        rng = keyed_rng(seed, 40, i)
        x = rng.standard_normal((4, 2))
        eps = rng.standard_normal((4, 2))
        t = sample_timestep(TimestepPolicy(), rng, schedule.T)
        for w in (1.0, 7.5, 100.0, 1000.0):
            diff = w * normalized_sds_grad(net, x, y, null_state, w, t, eps) - sds_grad(net, x, y, w, t, eps)
            worst["scaling"] = max(worst["scaling"], float(np.abs(diff).max()))
        losses = {
            LODSPrior(net, PriorConfig("lods_embedding", w=w, state=null_state, state_lr=1e-3)).alignment_loss(
                x, t, eps
            ).item()
            for w in (1.0, 100.0, 1000.0)
        }
        worst["alignment"] = max(worst["alignment"], float(max(losses) - min(losses)))
        worst["collapse"] = max(worst["collapse"], _max_abs(sds_grad(net, x, y, 1.0, t, eps),
                                                            reference_sds_grad(net, x, y, t, eps)))
        eps_y = predict_noise(net, x, t, y).data
        eps_null = predict_noise(net, x, t, Condition.null()).data
        worst["uncond"] = max(worst["uncond"], _max_abs(cfg_combine(eps_y, eps_null, 0.0), eps_null))
        worst["dds"] = max(worst["dds"], float(np.abs(dds_grad(net, x, y, x, y, 7.5, t, eps)).max()))
        worst["limit"] = max(worst["limit"], _max_abs(normalized_sds_grad(net, x, y, null_state, 1e9, t, eps),
                                                      limit_grad(net, x, y, null_state, t, eps)))
    check("scaling_identity", worst["scaling"], 1e-6)
    check("alignment_w_independence", worst["alignment"], 0.0, exact=True)
    check("cfg_collapse_w1", worst["collapse"], 0.0, exact=True)
    check("cfg_w0_unconditional", worst["uncond"], 0.0, exact=True)
    check("dds_zero_identity", worst["dds"], 0.0, exact=True)
    check("limit_relation", worst["limit"], 1e-6)

    adapter = attach_adapter(net, rank=4, seed=seed)
    rng = keyed_rng(seed, 41)
    x, eps = rng.standard_normal((4, 2)), rng.standard_normal((4, 2))
    t = 500
    bitwise = np.array_equal(predict_noise(net, x, t, y, adapter).data, predict_noise(net, x, t, y).data)
    check("adapter_zero_init", 0.0 if bitwise else 1.0, 0.0, exact=True)
    w = 7.5
    z = Tensor(net.schedule.alphas[t] * x + net.schedule.sigmas[t] * eps, dtype=np.float64)
    expected = (w - 1.0) * (predict_noise(net, z, t, y).data - predict_noise(net, z, t, Condition.null()).data)
    expected = expected * net.schedule.alphas[t]
    check("vsd_at_init", _max_abs(vsd_grad(net, adapter, x, y, w, t, eps), expected), 1e-6)

    budgets = op_count_budgets(seed)
    lods_extra = all(
        budgets[v] == (budgets["sds"][0] + 1, budgets["sds"][1] + 1) for v in ("lods_embedding", "lods_adapter")
    )
    check("op_budget_lods", 0.0 if lods_extra else 1.0, 0.0, exact=True)
    vsd_more = sum(budgets["vsd"]) > sum(budgets["lods_embedding"])
    check("op_budget_vsd_exceeds_lods", 0.0 if vsd_more else 1.0, 0.0, exact=True)

    sb = GaussianSandbox([1.0], 1.0, [0.0], 1.0)
    for w in (1.0, 7.5, 100.0):
        final = float(sandbox_distill("sds", w, seed=seed).theta.mean())
        check(f"sds_fixed_point_w{w:g}", abs(final - float(cfg_fixed_point(sb, w)[0])), 0.05)
    final = float(sandbox_distill("lods_embedding", 7.5, seed=seed).theta.mean())
    check("lods_embedding_reaches_mu_y", abs(final - 1.0), 0.1)
    return checks


def op_count_budgets(seed: int = 0) -> Dict[str, tuple]:
    """(forwards, backwards) of one distillation step per variant on a small network."""
    budgets = {}
    for variant in ("sds", "reference_sds", "normalized_sds", "dds", "vsd", "lods_embedding", "lods_adapter"):
        net = NetworkDenoiser(make_schedule(), data_dim=2, num_classes=2, hidden_width=16, seed=seed)
        gen = IdentityGenerator((4, 2))
        theta0 = gen.init_theta(keyed_rng(seed, 20))
        cfg = PriorConfig(
            variant=variant, w=7.5, state=make_state(net, variant, rank=2, seed=seed), seed=seed,
            state_lr=1e-3, source=theta0 if variant == "dds" else None,
        )
        record = lods_run(cfg, gen, theta0, net, steps=1).records[0]
        budgets[variant] = (record.forwards, record.backwards)
    return budgets


def editing_demo(seed: int = 0, steps: int = SANDBOX_STEPS, particles: int = SANDBOX_PARTICLES) -> List[dict]:
    """
    Edits on a two-condition sandbox (mu_0 = 1, mu_1 = -1). DDS from a class-1
    render toward class 0 shifts particles by mu_0 - mu_1 at w = 1; DDS with
    the source as target changes nothing.
    """
    schedule = make_schedule()
    d = make_analytic({0: [1.0], 1: [-1.0]}, {0: 1.0, 1: 1.0}, [0.0], 1.0, schedule)
    gen = IdentityGenerator((particles, 1), init_scale=0.1)
    theta0 = gen.init_theta(keyed_rng(seed, 20)) - 1.0
    rows = []

    def run(name, variant, target, w, expected, tol, **extra):
        cfg = PriorConfig(variant=variant, w=w, condition=Condition(target), seed=seed, theta_lr=SANDBOX_THETA_LR,
                          state_lr=SANDBOX_STATE_LR, state_optimizer="sgd", **extra)
        result = lods_run(cfg, gen, theta0, d, steps)
        change = float(np.mean(result.theta - theta0))
        rows.append({"edit": name, "variant": variant, "mean_change": change, "expected": expected,
                     "max_abs_change": float(np.abs(result.theta - theta0).max()),
                     "verdict": _verdict(abs(change - expected) <= tol)})

    run("dds_identity", "dds", 1, 7.5, 0.0, 0.0, source=theta0, source_condition=Condition(1))
    run("dds_class1_to_class0", "dds", 0, 1.0, 2.0, 0.1, source=theta0, source_condition=Condition(1))
    state = LearnableEmbedding.from_condition(d, Condition(1))
    run("lods_from_source_caption", "lods_embedding", 0, 7.5, 1.0 - float(np.mean(theta0)), 0.1, state=state)
    return rows


def recipe_suite(name: str, out_dir: Union[str, Path], seed: int = 0, checkpoint: Optional[str] = None,
                 steps: Optional[int] = None) -> dict:
    out_dir = _run_dir(out_dir)
    if name == "w-sweep":
        rows = w_sweep(seed, steps or SANDBOX_STEPS)
    elif name == "variant-compare":
        rows = variant_compare(checkpoint, seed, steps or 3000)
    elif name == "sandbox-acceptance":
        rows = sandbox_acceptance(seed)
    elif name == "editing-demo":
        rows = editing_demo(seed, steps or SANDBOX_STEPS)
    else:
        raise RecipeError(f"Unknown recipe '{name}', expected one of {RECIPES}")

    header = list(dict.fromkeys(k for row in rows for k in row))
    write_csv(out_dir / f"{name}.csv", rows, header)
    verdicts = [v for row in rows for k, v in row.items() if k.endswith("verdict")]
    report = {"recipe": name, "seed": seed, "rows": rows,
              "passed": all(v in ("pass", "n/a") for v in verdicts)}
    if name == "variant-compare":
        sds, lods = rows
        report["passed"] = lods["mmd"] <= sds["mmd"] and lods["mmd"] < 0.1
    write_json(out_dir / f"{name}.json", report)
    return report
