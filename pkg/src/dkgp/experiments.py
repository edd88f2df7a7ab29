"""Experiment configuration, orchestration and output files.

A run writes into its output directory:

- ``config.json``: the fully-resolved configuration
- ``trace.jsonl``: one JSON object per recorded optimization step; sampler
  runs append one ``{"sample", "potential"}`` object per retained sample
- ``metrics.json``: the metrics report (deterministic for a fixed config)
- ``model.params``: final parameters in the checkpoint format
- ``predictive.csv``: x, mean, lo, hi on a grid (1-D inputs only)
- ``correlation.csv``: x, rho for the first reference point; further
  reference points go to ``correlation_<i>.csv``
- ``predictions.csv``: per-test-point predictions (class probabilities for
  classification)
- ``chain/``: retained sampler states plus ``manifest.json``
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np

from . import autodiff as ad
from . import data as data_mod
from . import exact_gp as eg
from . import metrics as mt
from . import samplers as smp
from . import svgp as sv
from .autodiff import ParamVector
from .feature_net import FeatureNetParams, NetSpec, forward, init_params, load_params, save_params
from .kernels import ArdSeParams, DeepKernel, correlation_profile, features, mean_abs_correlation
from .linalg import RandomStream
from .optim import OptSchedule, adam_minimize

MODEL_KINDS = ("exact-se", "exact-dkl", "svgp", "vdkl", "svdkl", "fsvdkl")
MAX_INDUCING = 512


@dataclass
class SamplerConfig:
    kind: str = "hmc"  # or "sgld"
    step_size: float = 0.005
    n_leapfrog: int = 20
    burn_in: int = 10_000
    samples: int = 1000
    thin: int = 10
    weight_prior_var: float = 1.0
    hyper_prior_var: float = 10.0
    lr0: float = 1e-4
    decay: float = 0.4
    burn_in_epochs: int = 50
    sample_epochs: int = 50


@dataclass
class ExperimentConfig:
    """Every field has a default; a minimal config names dataset and model."""

    dataset: str = "toy"
    model: str = "exact-se"
    task: str = "regression"  # or "classification"
    hidden: list = field(default_factory=lambda: [100, 50])
    feature_dim: int = 2
    output_activation: bool = False
    shared_lengthscale: bool = False
    log_sigma_n2: float | None = None
    steps: int = 10_000
    lr: float = 1e-3
    decay_fractions: list = field(default_factory=lambda: [0.5, 0.75])
    weight_decay: float = 0.0
    batch_size: int = 32
    num_inducing: int = 100
    mc_samples: int = 10
    test_fraction: float = 0.0
    subsample: int | None = None
    seed: int = 0
    freeze_net: bool = False
    pretrain_steps: int = 0
    trace_every: int = 1
    grid_points: int = 300
    grid_margin: float = 0.5
    corr_refs: list | None = None
    sampler: SamplerConfig = field(default_factory=SamplerConfig)

    def __post_init__(self):
        if isinstance(self.sampler, dict):
            self.sampler = SamplerConfig(**self.sampler)
        self.validate()

    def validate(self):
        if self.model not in MODEL_KINDS:
            raise ValueError(f"unknown model {self.model!r}; choose from {MODEL_KINDS}")
        if self.task not in ("regression", "classification"):
            raise ValueError(f"unknown task {self.task!r}")
        if self.task == "classification" and self.model.startswith("exact"):
            raise ValueError("exact models need a Gaussian likelihood")
        if self.sampler.kind not in ("hmc", "sgld"):
            raise ValueError(f"unknown sampler {self.sampler.kind!r}")
        if self.steps < 0 or self.lr <= 0 or self.batch_size < 1:
            raise ValueError("invalid schedule")

    @property
    def is_deep(self) -> bool:
        return self.model in ("exact-dkl", "vdkl", "svdkl", "fsvdkl")

    @property
    def frozen(self) -> bool:
        return self.freeze_net or self.model == "fsvdkl"

    def schedule(self) -> OptSchedule:
        return OptSchedule(self.steps, self.lr, (), tuple(self.decay_fractions))

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=1, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise KeyError(f"unknown config fields {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))


# ---------------------------------------------------------------------------
# data and models


def prepare_data(cfg: ExperimentConfig) -> tuple[data_mod.Dataset, data_mod.Dataset | None]:
    d = data_mod.resolve_dataset(cfg.dataset, classification=cfg.task == "classification")
    if cfg.task == "classification" and d.is_regression:
        d = replace(d, y=d.y.astype(int))
    if cfg.subsample is not None:
        train, rest = data_mod.subsample(d, cfg.subsample, cfg.seed)
        stats = data_mod.normalization_stats(train)
        return data_mod._normalize(train, *stats), data_mod._normalize(rest, *stats)
    if cfg.test_fraction > 0:
        return data_mod.split_and_normalize(d, cfg.test_fraction, cfg.seed)
    return data_mod.normalize_all(d), None


def _net(cfg: ExperimentConfig, input_dim: int, stream: RandomStream) -> FeatureNetParams:
    spec = NetSpec(input_dim, tuple(cfg.hidden), cfg.feature_dim, cfg.output_activation, cfg.seed)
    return init_params(spec, stream)


def pretrain_network(net: FeatureNetParams, X, y, steps: int, lr: float, classes: int | None = None):
    """Standard network training: a linear head on the features, MSE or cross-entropy."""
    q = net.feature_dim
    out = 1 if classes is None else classes
    theta = ParamVector({**{k: np.asarray(v) for k, v in net.named_arrays().items()},
                         "head.W": np.zeros((out, q)), "head.b": np.zeros(out)})
    onehot = None if classes is None else np.eye(classes)[np.asarray(y, dtype=int)]
    yv = np.asarray(y, dtype=np.float64).reshape(-1, 1)

    def loss(view):
        h = forward(net.replace_arrays(view), X)
        o = ad.matmul(h, ad.transpose(view["head.W"])) + view["head.b"]
        if classes is None:
            r = o - yv
            return ad.mean(r * r)
        return -ad.sum(ad.log_softmax(o, axis=1) * onehot) / len(yv)

    theta = adam_minimize(loss, theta, OptSchedule(steps, lr))
    return net.replace_arrays(theta.as_dict())


def build_model(cfg: ExperimentConfig, train: data_mod.Dataset, stream: RandomStream):
    D = train.dim
    net = _net(cfg, D, stream.split(1)) if cfg.is_deep else None
    if net is not None and cfg.pretrain_steps > 0:
        classes = int(train.y.max()) + 1 if cfg.task == "classification" else None
        net = pretrain_network(net, train.X, train.y, cfg.pretrain_steps, cfg.lr, classes)
    if cfg.model == "exact-se":
        m = eg.default_se_model(D, cfg.shared_lengthscale)
    elif cfg.model == "exact-dkl":
        m = eg.default_dkl_model(net, cfg.feature_dim, cfg.shared_lengthscale)
    else:
        qdim = cfg.feature_dim if net is not None else D
        base = ArdSeParams.create(qdim, shared=cfg.shared_lengthscale)
        kernel = DeepKernel(base, net) if net is not None else base
        feats = np.asarray(features(kernel, train.X))
        M = min(cfg.num_inducing, MAX_INDUCING, train.n)
        Z = sv.init_inducing_kmeans(feats, M, stream.split(2))
        if cfg.task == "classification":
            C = int(train.y.max()) + 1
            lik = sv.SoftmaxLikelihood(C, cfg.mc_samples)
        else:
            C = 1
            lik = sv.GaussianLikelihood(-4.0 if net is not None else float(np.log(0.1)))
        m = sv.SvgpModel(kernel, sv.VariationalState.prior(Z, C), lik)
    if cfg.log_sigma_n2 is not None:
        if isinstance(m, eg.GpModel):
            m = replace(m, log_sigma_n2=cfg.log_sigma_n2)
        else:
            m = replace(m, likelihood=sv.GaussianLikelihood(cfg.log_sigma_n2))
    return m


def model_from_params(cfg: ExperimentConfig, train: data_mod.Dataset, params: ParamVector):
    m = build_model(replace(cfg, pretrain_steps=0), train, RandomStream(cfg.seed))
    return m.with_params(params)


# ---------------------------------------------------------------------------
# fitting


def _trace_lines(traces) -> list[str]:
    return [t.to_json() for t in traces]


def fit(cfg: ExperimentConfig, train: data_mod.Dataset, stream: RandomStream):
    """Point-estimate training; returns (model, trace lines, objective per point)."""
    m = build_model(cfg, train, stream)
    if isinstance(m, eg.GpModel):
        trainable = None
        if cfg.frozen and cfg.is_deep:
            trainable = [n for n in m.to_params().names if not n.startswith("net.")]
        m, traces = eg.fit_full_batch(
            m, train.X, train.y, cfg.schedule(), weight_decay=cfg.weight_decay,
            trainable=trainable, trace_every=cfg.trace_every,
        )
        obj = eg.log_marginal_decomposed(m, train.X, train.y).total / train.n
        return m, _trace_lines(traces), obj
    bs = train.n if cfg.model == "vdkl" else min(cfg.batch_size, train.n)
    sched = sv.SvgpSchedule(cfg.steps, bs, cfg.lr, tuple(cfg.schedule().boundaries()))
    m, traces = sv.fit_svgp(
        m, train.X, train.y, sched, stream.split(3), freeze_net=cfg.frozen and cfg.is_deep,
        weight_decay=cfg.weight_decay, trace_every=cfg.trace_every,
    )
    obj = sv.full_elbo(m, train.X, train.y, stream.split(4)) / train.n
    return m, _trace_lines(traces), obj


# ---------------------------------------------------------------------------
# prediction and reporting


def _regression_predict(m, train, X):
    if isinstance(m, eg.GpModel):
        p = eg.predict(m, train.X, train.y, X, with_noise=True, full_cov=False)
        return p.mean, p.var
    return sv.predict_y(m, X)


def _grid(cfg, train):
    lo, hi = train.X[:, 0].min(), train.X[:, 0].max()
    pad = cfg.grid_margin * (hi - lo)
    return np.linspace(lo - pad, hi + pad, cfg.grid_points)


def _write_csv(path: Path, header: list[str], cols) -> None:
    rows = [",".join(header)]
    for vals in zip(*cols):
        rows.append(",".join(repr(float(v)) for v in vals))
    path.write_text("\n".join(rows) + "\n")


def _write_corr(out: Path, cfg, kernel, train):
    grid = _grid(cfg, train)
    refs = cfg.corr_refs
    if refs is None:
        lo, hi = train.X[:, 0].min(), train.X[:, 0].max()
        refs = [lo + 0.25 * (hi - lo), lo + 0.75 * (hi - lo)]
    for i, r in enumerate(refs):
        rho = correlation_profile(kernel, [[float(r)]], grid[:, None])
        name = "correlation.csv" if i == 0 else f"correlation_{i}.csv"
        _write_csv(out / name, ["x", "rho"], [grid, rho])


def report_regression(cfg, m, train, test, obj, out: Path | None, mixture=None) -> mt.MetricsReport:
    rep = mt.MetricsReport(cfg.model, cfg.dataset, cfg.seed, objective_per_point=obj)

    def pred(X):
        if mixture is not None:
            return mixture(X)
        mu, var = _regression_predict(m, train, X)
        return smp.mixture_predictive([mu], [var])

    ptr = pred(train.X)
    rep.train_rmse = mt.rmse(ptr.mean, train.y)
    rep.train_ll = float(np.mean(ptr.log_density(train.y)))
    if test is not None and test.n:
        pte = pred(test.X)
        rep.test_rmse = mt.rmse(pte.mean, test.y)
        rep.test_ll = float(np.mean(pte.log_density(test.y)))
        if out is not None:
            _write_csv(out / "predictions.csv", ["y", "mean", "var"], [test.y, pte.mean, pte.var])
    if train.n >= 2:
        rep.mean_abs_corr = mean_abs_correlation(m.kernel, train.X)
    if out is not None and train.dim == 1:
        grid = _grid(cfg, train)
        pg = pred(grid[:, None])
        sd = np.sqrt(pg.var)
        _write_csv(out / "predictive.csv", ["x", "mean", "lo", "hi"], [grid, pg.mean, pg.mean - 2 * sd, pg.mean + 2 * sd])
        _write_corr(out, cfg, m.kernel, train)
    return rep


def report_classification(cfg, m, train, test, obj, out: Path | None, stream, prob_fn=None) -> mt.MetricsReport:
    rep = mt.MetricsReport(cfg.model, cfg.dataset, cfg.seed, objective_per_point=obj)
    prob_fn = prob_fn or (lambda X, s: sv.predict_proba(m, X, s))
    rep.train_accuracy = mt.accuracy(prob_fn(train.X, stream.split(5)), train.y)
    rep.train_ll = mt.mean_class_ll(prob_fn(train.X, stream.split(5)), train.y)
    if test is not None and test.n:
        P = prob_fn(test.X, stream.split(6))
        rep.test_accuracy = mt.accuracy(P, test.y)
        rep.test_ll = mt.mean_class_ll(P, test.y)
        rep.test_ece = mt.ece(P, test.y)
        rep.test_incorrect_ll, rep.incorrect_empty = mt.incorrect_only_ll(P, test.y)
        if out is not None:
            C = P.shape[1]
            _write_csv(out / "predictions.csv", ["label", *[f"p{c}" for c in range(C)]], [test.y, *P.T])
    if train.n >= 2:
        rep.mean_abs_corr = mean_abs_correlation(m.kernel, train.X)
    return rep


def _write_outputs(out: Path, cfg, m, trace_lines, rep: mt.MetricsReport):
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n")
    (out / "trace.jsonl").write_text("".join(line + "\n" for line in trace_lines))
    save_params(out / "model.params", m.to_params())
    (out / "metrics.json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n")


def run_experiment(cfg: ExperimentConfig, out=None, mode: str = "fit") -> mt.MetricsReport:
    """Train (``mode="fit"``) or sample (``"hmc"``/``"sgld"``) and report."""
    cfg.validate()
    stream = RandomStream(cfg.seed)
    train, test = prepare_data(cfg)
    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    try:
        if mode == "fit":
            m, lines, obj = fit(cfg, train, stream)
            mixture = None
        elif mode in ("hmc", "sgld"):
            m, lines, obj, mixture = _sample(cfg, train, stream, mode, out)
        else:
            raise ValueError(f"unknown mode {mode!r}")
    except (FloatingPointError, np.linalg.LinAlgError) as exc:
        raise RuntimeError(f"{cfg.model} on {cfg.dataset} (seed {cfg.seed}): {exc}") from exc
    if cfg.task == "classification":
        rep = report_classification(cfg, m, train, test, obj, out, stream, mixture)
    else:
        rep = report_regression(cfg, m, train, test, obj, out, mixture)
    if out is not None:
        _write_outputs(out, cfg, m, lines, rep)
    return rep


# ---------------------------------------------------------------------------
# sampling


def _sample(cfg, train, stream, mode, out):
    sc = cfg.sampler
    spec = smp.PotentialSpec(
        "exact-lml" if mode == "hmc" else "minibatch", sc.weight_prior_var, sc.hyper_prior_var
    )
    lines: list[str] = []
    if cfg.steps > 0:
        m, lines, _ = fit(cfg, train, stream)
    else:
        m = build_model(cfg, train, stream)
    if mode == "hmc":
        if not isinstance(m, eg.GpModel):
            raise ValueError("HMC needs an exact model")
        pot = smp.exact_gp_potential(m, train.X, train.y, spec)
        hc = smp.HmcConfig(sc.step_size, sc.n_leapfrog, sc.burn_in, sc.samples, sc.thin)
        chain = smp.hmc_run(pot, pot.initial(), hc, stream.split(7))
    else:
        if isinstance(m, eg.GpModel):
            pot = smp.exact_gp_potential(m, train.X, train.y, spec)
        else:
            pot = smp.svgp_potential(m, train.X, train.y, spec, stream=stream.split(8))
        gc = smp.SgldConfig(sc.lr0, sc.decay, sc.burn_in_epochs, sc.sample_epochs, cfg.batch_size)
        chain = smp.sgld_run(pot, pot.initial(), gc, stream.split(7))
    if not chain.samples:
        raise ValueError("sampler retained no samples")
    if out is not None:
        smp.save_chain(out / "chain", chain)
    base = m.to_params().as_dict()
    members = [m.with_params({**base, **s.as_dict()}) for s in chain.samples]
    last = members[-1]
    lines = lines + [
        json.dumps({"sample": i, "potential": float(u)}) for i, u in enumerate(chain.energies)
    ]
    lines.append(json.dumps({"acceptance_rate": chain.acceptance_rate}))

    obj = -float(np.mean(chain.energies)) / train.n
    return last, lines, obj, _chain_predictor(cfg, members, train)


def _chain_predictor(cfg, members, train):
    """Predictive averaged over sampled models: probabilities or a Gaussian mixture."""
    if cfg.task == "classification":
        def mixture(X, s):
            return smp.average_probabilities([sv.predict_proba(mm, X, s.split(i)) for i, mm in enumerate(members)])
    else:
        def mixture(X):
            preds = [_regression_predict(mm, train, X) for mm in members]
            return smp.mixture_predictive([p[0] for p in preds], [p[1] for p in preds])
    return mixture


def evaluate_saved(run_dir, out=None) -> mt.MetricsReport:
    """Recompute metrics from a finished run's config and parameters."""
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.load(run_dir / "config.json")
    train, test = prepare_data(cfg)
    m = model_from_params(cfg, train, load_params(run_dir / "model.params"))
    stream = RandomStream(cfg.seed)
    if isinstance(m, eg.GpModel):
        obj = eg.log_marginal_decomposed(m, train.X, train.y).total / train.n
    else:
        obj = sv.full_elbo(m, train.X, train.y, stream.split(4)) / train.n
    mixture = None
    chain_dir = run_dir / "chain"
    if (chain_dir / "manifest.json").exists():
        samples, potentials = smp.load_chain(chain_dir)
        obj = -float(np.mean(potentials)) / train.n
        base = m.to_params().as_dict()
        members = [m.with_params({**base, **s.as_dict()}) for s in samples]
        mixture = _chain_predictor(cfg, members, train)

    out = Path(out) if out is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
    if cfg.task == "classification":
        rep = report_classification(cfg, m, train, test, obj, out, stream, mixture)
    else:
        rep = report_regression(cfg, m, train, test, obj, out, mixture)
    if out is not None:
        (out / "metrics.json").write_text(json.dumps(rep.to_dict(), indent=1, sort_keys=True) + "\n")
    return rep


def diagnose_correlation(run_dir, out=None) -> dict:
    """Prior-correlation diagnostics of a saved model on its training inputs."""
    run_dir = Path(run_dir)
    cfg = ExperimentConfig.load(run_dir / "config.json")
    train, _ = prepare_data(cfg)
    m = model_from_params(cfg, train, load_params(run_dir / "model.params"))
    result = {"mean_abs_corr": mean_abs_correlation(m.kernel, train.X), "sigma_f2": m.kernel.sigma_f2}
    out = Path(out) if out is not None else run_dir
    out.mkdir(parents=True, exist_ok=True)
    if train.dim == 1:
        _write_corr(out, cfg, m.kernel, train)
    (out / "correlation.json").write_text(json.dumps(result, indent=1, sort_keys=True) + "\n")
    return result
