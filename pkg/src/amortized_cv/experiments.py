"""Measurement protocols: static/dynamic variance reduction, NELBO traces,
the two-batch illustration and step timing.

Every protocol takes a ``RunConfig`` and returns plain row dicts. Each seed
is an independent job whose random streams are derived from
``(seed, purpose, ...)`` substreams; arms within a seed share their batch and
noise streams, so comparisons between arms are paired.
"""
from __future__ import annotations

import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from .coefficients import (ContextFreeCoefficient, InsufficientSamplesError,
                           empirical_optimal_coefficient, xavier_init)
from .data import load_csv, sample_minibatch, synth_logreg
from .engine import alternating_step, controlled_gradient, make_optimizer
from .models import LogisticRegressionModel, QuadraticModel
from .noise_basis import eval_basis, gaussian_expectation, substream
from .objectives import evaluate_objective

CHECKPOINT_LABELS = {10: "early", 200: "mid", 1000: "late"}


class DegenerateInstanceWarning(UserWarning):
    pass


def checkpoint_label(step):
    return CHECKPOINT_LABELS.get(int(step), str(step))


# -- construction ---------------------------------------------------------------


def parse_arm(arm):
    """``none`` | ``context_free`` | ``amortized:32x32`` (``amortized:`` is linear)."""
    arm = arm.strip()
    if arm in ("none", "context_free"):
        return arm, ()
    kind, _, hidden = arm.partition(":")
    if kind != "amortized":
        raise ValueError(f"unknown provider arm {arm!r}")
    try:
        return kind, tuple(int(h) for h in hidden.split("x") if h)
    except ValueError:
        raise ValueError(f"bad hidden sizes in arm {arm!r}") from None


def make_provider(arm, model, order, seed):
    kind, hidden = parse_arm(arm)
    out_shape = (model.P, order * model.noise_dim)
    if kind == "none":
        return None
    if kind == "context_free":
        return ContextFreeCoefficient(out_shape)
    sizes = [model.context_dim, *hidden, out_shape[0] * out_shape[1]]
    return xavier_init(sizes, substream(seed, "provider-init", arm), out_shape)


def build_model(cfg, seed):
    kind = cfg["model.kind"]
    if kind == "logreg":
        if cfg["data.csv"]:
            ds = load_csv(cfg["data.csv"], cfg["data.target"] or None)
        else:
            ds, _ = synth_logreg(substream(seed, "data"), cfg["data.n"], cfg["data.dim"],
                                 cfg["data.clusters"], cfg["data.weight_scale"],
                                 cfg["data.spread"], cfg["data.offset"])
        X = ds.destandardize() if cfg["data.model_features"] == "raw" else ds.features
        context = np.hstack([ds.features, ds.targets[:, None]])
        return LogisticRegressionModel(X, ds.targets, context=context)
    if kind == "quadratic":
        return QuadraticModel.random(substream(seed, "data"), cfg["data.n"], cfg["quad.p"],
                                     cfg["quad.d"], cfg["quad.context_dim"])
    raise ValueError(f"unknown model kind {kind!r}")


def run_seeds(fn, cfg, jobs=1):
    """Apply ``fn(cfg, seed)`` to every seed and concatenate rows in seed order."""
    seeds = [cfg["seed"] + k for k in range(cfg["seeds"])]
    if jobs > 1 and len(seeds) > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            parts = list(pool.map(fn, [cfg] * len(seeds), seeds))
    else:
        parts = [fn(cfg, s) for s in seeds]
    return [row for part in parts for row in part]


# -- variance ratio ---------------------------------------------------------------


@dataclass(frozen=True)
class VarianceReport:
    checkpoint: str
    cv_step: int
    ratio: float
    trace_ratio: float
    draws: int
    provider: str


def variance_ratio(model, theta, provider, batch, draws, rng, order=1, num_samples=1,
                   checkpoint="", cv_step=0, label=""):
    """Var|G~| / Var|G^| over ``draws`` paired noise draws at fixed theta and batch.

    Controlled and uncontrolled gradients share every noise draw, so a zero
    coefficient block gives a ratio of exactly one. ``trace_ratio`` is the
    same comparison for the trace of the gradient covariance.
    """
    if draws < 2:
        raise InsufficientSamplesError("variance_ratio needs draws >= 2")
    batch = np.asarray(batch)
    if provider is None:
        coeffs = np.zeros((batch.size, model.P, order * model.noise_dim))
    else:
        coeffs = provider.coefficients(model.contexts(batch))
    scale = model.N / (batch.size * num_samples)
    g_hat = np.empty((draws, model.P))
    g_tilde = np.empty((draws, model.P))
    for r in range(draws):
        eps = rng.standard_normal((batch.size, num_samples, model.noise_dim))
        cg = controlled_gradient(model.per_datum_grads(theta, batch, eps),
                                 eval_basis(eps, order), coeffs, scale)
        g_hat[r] = cg.g_hat
        g_tilde[r] = cg.g_tilde
    n_hat = np.linalg.norm(g_hat, axis=1)
    n_tilde = np.linalg.norm(g_tilde, axis=1)
    ratio = n_tilde.var(ddof=1) / n_hat.var(ddof=1)
    trace = g_tilde.var(axis=0, ddof=1).sum() / g_hat.var(axis=0, ddof=1).sum()
    if not label:
        label = "none" if provider is None else type(provider).__name__
    return VarianceReport(checkpoint, cv_step, float(ratio), float(trace), draws, label)


def mean_variance_ratio(model, theta, provider, batches, draws, seed, keys, order=1):
    """Average ``variance_ratio`` over fixed evaluation batches.

    Noise for batch ``j`` comes from substream ``(seed, *keys, j)``, so two
    providers evaluated with the same keys see identical draws.
    """
    reports = [variance_ratio(model, theta, provider, b, draws,
                              substream(seed, *keys, j), order)
               for j, b in enumerate(batches)]
    return (float(np.mean([r.ratio for r in reports])),
            float(np.mean([r.trace_ratio for r in reports])))


def _eval_batches(cfg, model, seed, *keys):
    rng = substream(seed, "eval-batch", *keys)
    return [sample_minibatch(rng, model.N, cfg["train.batch_size"])
            for _ in range(cfg["variance.eval_batches"])]


def train_coefficients(model, theta, provider, objective, opt, batch_size, steps, rng,
                       order=1, callback=None):
    """Fit a provider at frozen ``theta``; each step draws a fresh batch and noise."""
    for step in range(1, steps + 1):
        batch = sample_minibatch(rng, model.N, batch_size)
        eps = rng.standard_normal((batch_size, 1, model.noise_dim))
        grads = model.per_datum_grads(theta, batch, eps)
        coeffs, cache = provider.forward(model.contexts(batch))
        ev = evaluate_objective(objective, grads, eval_basis(eps, order), coeffs)
        provider.params = opt.step(provider.params, provider.backward(cache, ev.d_coeff))
        if callback is not None:
            callback(step)


def train_uncontrolled(model, cfg, seed, checkpoints):
    """Uncontrolled model optimisation; returns ``{step: theta}`` snapshots."""
    opt = make_optimizer(cfg["optimizer.model.kind"], cfg["optimizer.model.lr"])
    rng = substream(seed, "model-train")
    theta = model.initial_theta()
    snaps = {0: theta.copy()} if 0 in checkpoints else {}
    for t in range(1, max(checkpoints) + 1):
        batch = sample_minibatch(rng, model.N, cfg["train.batch_size"])
        theta, _ = alternating_step(model, theta, None, None, opt, None, batch, rng,
                                    cfg["cv.order"], cfg["train.samples"])
        if t in checkpoints:
            snaps[t] = theta.copy()
    return snaps


# -- static variance --------------------------------------------------------------


def _static_seed(cfg, seed):
    model = build_model(cfg, seed)
    order = cfg["cv.order"]
    checkpoints = cfg.list("static.checkpoints", int)
    log_steps = set(cfg.list("static.log_steps", int))
    objective = cfg["cv.objective"]
    snaps = train_uncontrolled(model, cfg, seed, checkpoints)
    rows = []
    for ck in checkpoints:
        theta = snaps[ck]
        batches = _eval_batches(cfg, model, seed, "static", ck)
        for arm in cfg.list("cv.arms"):
            provider = make_provider(arm, model, order, seed)

            def record(step):
                if step not in log_steps:
                    return
                ratio, trace = mean_variance_ratio(
                    model, theta, provider, batches, cfg["variance.draws"], seed,
                    ("static-eval", ck, step), order)
                rows.append({"checkpoint": checkpoint_label(ck), "cv_step": step,
                             "provider": arm, "objective": objective, "ratio": ratio,
                             "trace_ratio": trace, "draws": cfg["variance.draws"],
                             "seed": seed})

            record(0)
            if provider is not None:
                opt = make_optimizer(cfg["optimizer.coeff.kind"], cfg["optimizer.coeff.lr"])
                train_coefficients(model, theta, provider, objective, opt,
                                   cfg["train.batch_size"], cfg["static.cv_steps"],
                                   substream(seed, "cv-train", ck), order, record)
            else:
                for step in sorted(log_steps):
                    if 0 < step <= cfg["static.cv_steps"]:
                        record(step)
    return rows


def static_variance_experiment(cfg, jobs=1):
    """Variance ratios of coefficient providers trained at frozen model checkpoints.

    The model is first trained without control variates; at every checkpoint
    its parameters are frozen and each provider arm is trained for
    ``static.cv_steps`` steps with the configured objective, recording the
    ratio (averaged over ``variance.eval_batches`` fixed batches) at
    ``static.log_steps``.
    """
    return run_seeds(_static_seed, cfg, jobs)


# -- dynamic variance -------------------------------------------------------------


def _joint_run(model, cfg, seed, arm, objective, on_step):
    order = cfg["cv.order"]
    provider = make_provider(arm, model, order, seed)
    model_opt = make_optimizer(cfg["optimizer.model.kind"], cfg["optimizer.model.lr"])
    coeff_opt = make_optimizer(cfg["optimizer.coeff.kind"], cfg["optimizer.coeff.lr"])
    rng = substream(seed, "joint")
    theta = model.initial_theta()
    for t in range(1, cfg["train.iterations"] + 1):
        batch = sample_minibatch(rng, model.N, cfg["train.batch_size"])
        theta, report = alternating_step(model, theta, provider, objective, model_opt,
                                         coeff_opt, batch, rng, order, cfg["train.samples"])
        on_step(t, theta, provider, report)
    return theta


def _dynamic_seed(cfg, seed):
    model = build_model(cfg, seed)
    checkpoints = set(cfg.list("dynamic.checkpoints", int))
    objective = cfg["cv.objective"]
    rows = []
    for arm in cfg.list("cv.arms"):
        def on_step(t, theta, provider, report, arm=arm):
            if t not in checkpoints:
                return
            batches = _eval_batches(cfg, model, seed, "dynamic", t)
            ratio, trace = mean_variance_ratio(model, theta, provider, batches,
                                               cfg["variance.draws"], seed,
                                               ("dynamic-eval", t), cfg["cv.order"])
            rows.append({"checkpoint": checkpoint_label(t), "cv_step": t, "provider": arm,
                         "objective": objective, "ratio": ratio, "trace_ratio": trace,
                         "draws": cfg["variance.draws"], "seed": seed})

        _joint_run(model, cfg, seed, arm, objective, on_step)
    return rows


def dynamic_variance_experiment(cfg, jobs=1):
    """Variance ratios measured while model and coefficients train jointly."""
    return run_seeds(_dynamic_seed, cfg, jobs)


# -- NELBO traces -----------------------------------------------------------------


def trace_methods(cfg):
    methods = [("none", None)]
    for arm in cfg.list("cv.arms"):
        if arm == "none":
            continue
        methods.extend((arm, obj) for obj in cfg.list("trace.objectives"))
    return methods


def method_name(arm, objective):
    return arm if objective is None else f"{arm}/{objective}"


def _trace_seed(cfg, seed):
    model = build_model(cfg, seed)
    samples = cfg["trace.nelbo_samples"]
    var_every = cfg["trace.var_every"]
    per_method = {}
    for arm, objective in trace_methods(cfg):
        trace = []

        def on_step(t, theta, provider, report, trace=trace):
            nelbo = model.nelbo_estimate(theta, samples, substream(seed, "nelbo", t))
            var = ""
            if var_every and t % var_every == 0:
                batch = _eval_batches(cfg, model, seed, "trace", t)[0]
                g = []
                for r in range(cfg["variance.draws"]):
                    eps = substream(seed, "trace-var", t, r).standard_normal(
                        (batch.size, 1, model.noise_dim))
                    coeffs = (np.zeros((batch.size, model.P, cfg["cv.order"] * model.noise_dim))
                              if provider is None else provider.coefficients(model.contexts(batch)))
                    cg = controlled_gradient(model.per_datum_grads(theta, batch, eps),
                                             eval_basis(eps, cfg["cv.order"]), coeffs,
                                             model.N / batch.size)
                    g.append(np.linalg.norm(cg.g_tilde))
                var = float(np.var(g, ddof=1))
            trace.append((nelbo, var))

        _joint_run(model, cfg, seed, arm, objective, on_step)
        per_method[method_name(arm, objective)] = trace
    baseline = per_method["none"]
    rows = []
    for name, trace in per_method.items():
        for t, ((nelbo, var), (base, _)) in enumerate(zip(trace, baseline), start=1):
            rows.append({"iter": t, "method": name, "seed": seed, "nelbo": nelbo,
                         "nelbo_diff": nelbo - base, "grad_norm_var": var})
    return rows


def nelbo_trace_experiment(cfg, jobs=1):
    """Joint training traces of the full-data NELBO for every method.

    ``nelbo_diff`` is measured against the uncontrolled single-sample run of
    the same seed, which shares batches, gradient noise and NELBO noise.
    """
    return run_seeds(_trace_seed, cfg, jobs)


def final_window_gaps(rows, window=200):
    """Per-method list (over seeds) of mean ``nelbo_diff`` over the last ``window`` iterations."""
    last = max(r["iter"] for r in rows)
    acc = {}
    for r in rows:
        if r["iter"] > last - window:
            acc.setdefault(r["method"], {}).setdefault(r["seed"], []).append(r["nelbo_diff"])
    return {m: [float(np.mean(v)) for _, v in sorted(by_seed.items())]
            for m, by_seed in acc.items()}


# -- two-batch illustration ---------------------------------------------------------


@dataclass(frozen=True)
class TwoBatchResult:
    contexts: tuple  # ((x1, y1), (x2, y2))
    coef_batch: tuple
    coef_shared: float
    var_none: tuple
    var_shared: tuple
    var_batch: tuple
    curves: list  # (batch, epsilon, g, cv_batch, cv_shared)


def _two_batch_model(contexts, mean, log_scale):
    X = np.array([[c[0]] for c in contexts])
    y = np.array([c[1] for c in contexts], dtype=float)
    model = LogisticRegressionModel(X, y)
    return model, np.array([mean, log_scale])


def _two_batch_moments(model, theta, b):
    """Quadrature ``(E g, Var g, E[g eps])`` for the mean-gradient of datum ``b``."""
    def f(nodes):
        g = model.per_datum_grads(theta, [b], nodes[None, :, :])[0, :, 0]
        return np.column_stack([g, g * g, g * nodes[:, 0]])
    m1, m2, cov = gaussian_expectation(f, 1, 80)
    return m1, m2 - m1 * m1, cov


def find_two_batch_contexts(mean=0.5, log_scale=0.0, grid=None):
    """Search context pairs where the shared coefficient hurts one batch.

    Uses quadrature moments; returns the pair maximizing the relative variance
    increase of the hurt batch, or ``None``.
    """
    if grid is None:
        grid = [float(x) for x in np.round(np.linspace(-3.0, 3.0, 25), 6) if x != 0.0]
    best, best_score = None, 0.0
    points = [(x, y) for x in grid for y in (0, 1)]
    for i, p1 in enumerate(points):
        for p2 in points[i + 1:]:
            model, theta = _two_batch_model((p1, p2), mean, log_scale)
            mom = [_two_batch_moments(model, theta, b) for b in (0, 1)]
            c_shared = 0.5 * (mom[0][2] + mom[1][2])
            for b in (0, 1):
                var, cb = mom[b][1], mom[b][2]
                shared = var - 2.0 * c_shared * cb + c_shared ** 2
                other = mom[1 - b]
                if var > 0 and other[1] > 0 and shared > var and cb != 0 and other[2] != 0:
                    score = shared / var
                    if score > best_score:
                        best, best_score = (p1, p2), score
    return best


def illustrate_two_batches(cfg):
    """Two single-datum batches of 1-D logistic regression.

    Fits per-batch and pooled (batch-independent) linear coefficients by
    least squares on ``two_batch.draws`` draws per batch and reports the
    estimator variance with no CV, the shared CV and the per-batch CV.
    """
    text = cfg["two_batch.contexts"].strip()
    mean, log_scale = cfg["two_batch.mean"], cfg["two_batch.log_scale"]
    if text:
        contexts = tuple(tuple(float(v) for v in pair.split(",")) for pair in text.split(";"))
        if len(contexts) != 2 or any(len(c) != 2 for c in contexts):
            raise ValueError("two_batch.contexts must look like 'x1,y1;x2,y2'")
    else:
        contexts = find_two_batch_contexts(mean, log_scale)
        if contexts is None:
            raise RuntimeError("no context pair found where the shared coefficient hurts")
    if contexts[0] == contexts[1]:
        warnings.warn("identical context points: batch-dependent and batch-independent "
                      "coefficients coincide", DegenerateInstanceWarning, stacklevel=2)
    model, theta = _two_batch_model(contexts, mean, log_scale)
    draws = cfg["two_batch.draws"]
    g, eps = [], []
    for b in (0, 1):
        e = substream(cfg["seed"], "two_batch", b).standard_normal((1, draws, 1))
        g.append(model.per_datum_grads(theta, [b], e)[0, :, 0])
        eps.append(e[0, :, 0])
    coef_batch = tuple(float(empirical_optimal_coefficient(g[b], eps[b])[0, 0]) for b in (0, 1))
    coef_shared = float(empirical_optimal_coefficient(np.concatenate(g),
                                                      np.concatenate(eps))[0, 0])
    var_none = tuple(float(np.var(g[b], ddof=1)) for b in (0, 1))
    var_shared = tuple(float(np.var(g[b] - coef_shared * eps[b], ddof=1)) for b in (0, 1))
    var_batch = tuple(float(np.var(g[b] - coef_batch[b] * eps[b], ddof=1)) for b in (0, 1))
    grid = np.linspace(-3.0, 3.0, cfg["two_batch.grid"])
    curves = []
    for b in (0, 1):
        gb = model.per_datum_grads(theta, [b], grid[None, :, None])[0, :, 0]
        for e, v in zip(grid, gb):
            curves.append((b, float(e), float(v), coef_batch[b] * float(e), coef_shared * float(e)))
    return TwoBatchResult(tuple(tuple(c) for c in contexts), coef_batch, coef_shared,
                      var_none, var_shared, var_batch, curves)


def two_batch_rows(result):
    rows = [{"kind": "curve_g", "batch": b, "epsilon": e, "value": g}
            for b, e, g, _, _ in result.curves]
    rows += [{"kind": "curve_cv_batch", "batch": b, "epsilon": e, "value": cb}
             for b, e, _, cb, _ in result.curves]
    rows += [{"kind": "curve_cv_shared", "batch": b, "epsilon": e, "value": cs}
             for b, e, _, _, cs in result.curves]
    for b in (0, 1):
        rows.append({"kind": "context_x", "batch": b, "epsilon": "", "value": result.contexts[b][0]})
        rows.append({"kind": "context_y", "batch": b, "epsilon": "", "value": result.contexts[b][1]})
        rows.append({"kind": "coef_batch", "batch": b, "epsilon": "", "value": result.coef_batch[b]})
        rows.append({"kind": "coef_shared", "batch": b, "epsilon": "", "value": result.coef_shared})
        rows.append({"kind": "var_none", "batch": b, "epsilon": "", "value": result.var_none[b]})
        rows.append({"kind": "var_shared", "batch": b, "epsilon": "", "value": result.var_shared[b]})
        rows.append({"kind": "var_batch", "batch": b, "epsilon": "", "value": result.var_batch[b]})
    return rows


# -- timing -----------------------------------------------------------------------


def timing_overhead(cfg):
    """Wall-clock time per alternating step for every method.

    Each method runs ``timing.reps`` repetitions of ``timing.steps`` steps;
    the table reports mean and standard deviation of the per-step time in ms.
    Absolute values depend on the machine.
    """
    seed = cfg["seed"]
    model = build_model(cfg, seed)
    order = cfg["cv.order"]
    rows = []
    for arm, objective in trace_methods(cfg):
        provider = make_provider(arm, model, order, seed)
        model_opt = make_optimizer(cfg["optimizer.model.kind"], cfg["optimizer.model.lr"])
        coeff_opt = make_optimizer(cfg["optimizer.coeff.kind"], cfg["optimizer.coeff.lr"])
        rng = substream(seed, "timing")
        theta = model.initial_theta()
        per_step = []
        for _ in range(cfg["timing.reps"]):
            start = time.perf_counter()
            for _ in range(cfg["timing.steps"]):
                batch = sample_minibatch(rng, model.N, cfg["train.batch_size"])
                theta, _ = alternating_step(model, theta, provider, objective, model_opt,
                                            coeff_opt, batch, rng, order, cfg["train.samples"])
            per_step.append(1e3 * (time.perf_counter() - start) / cfg["timing.steps"])
        rows.append({"method": method_name(arm, objective), "reps": cfg["timing.reps"],
                     "steps": cfg["timing.steps"], "mean_ms": float(np.mean(per_step)),
                     "std_ms": float(np.std(per_step, ddof=1)) if len(per_step) > 1 else 0.0})
    return rows
