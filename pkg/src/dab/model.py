"""Distance Aware Bottleneck network and its training loop.

An MLP encoder maps x to a diagonal Gaussian over the latent z, a linear
decoder maps z to a prediction, and a codebook of Gaussian centroids
quantizes the training encoders.  The uncertainty of an input is the
expected KL of its encoder from the codebook under the soft assignment.
"""

from __future__ import annotations

import dataclasses
import time
from dataclasses import dataclass, field

import numpy as np

from . import codebook as cbm
from . import diffcore as dc
from .codebook import Codebook
from .datasets import Dataset, Normalization
from .gauss import DiagGaussian, from_raw, kl, sample

ACTIVATIONS = {"elu": dc.elu, "relu": dc.relu}
TASKS = ("regression", "classification")
INITS = ("truncated_normal", "glorot_uniform")


@dataclass
class DabConfig:
    beta: float = 1.0
    alpha: float = 5.0
    k: int = 1
    latent_dim: int = 8
    gamma: float = 0.0
    lr_theta: float = 1e-3
    lr_phi: float = 1e-2
    epochs: int = 1500
    batch_size: int = 20
    seed: int = 0
    task: str = "regression"
    num_classes: int | None = None
    margin_enabled: bool = False
    u_lb: float = 100.0
    encoder_hidden: list = field(default_factory=lambda: [100, 100])
    activation: str = "elu"
    optimizer_theta: str = "adam"
    optimizer_phi: str = "adam"
    init_stddev: float = 0.1
    init: str = "truncated_normal"

    def errors(self) -> list[str]:
        """Every constraint violation, not just the first."""
        errs = []
        for name in ("beta", "alpha", "u_lb"):
            if not np.isfinite(getattr(self, name)) or getattr(self, name) < 0:
                errs.append(f"{name} must be a finite number >= 0")
        for name in ("lr_theta", "lr_phi", "init_stddev"):
            if not getattr(self, name) > 0:
                errs.append(f"{name} must be > 0")
        for name in ("k", "latent_dim", "batch_size"):
            v = getattr(self, name)
            if not isinstance(v, int) or isinstance(v, bool) or v < 1:
                errs.append(f"{name} must be a positive integer")
        if not isinstance(self.epochs, int) or isinstance(self.epochs, bool) or self.epochs < 0:
            errs.append("epochs must be a non-negative integer")
        if not isinstance(self.seed, int) or not -2**63 <= self.seed < 2**64:
            errs.append("seed must be a 64-bit integer")
        if not 0.0 <= self.gamma <= 1.0:
            errs.append("gamma must lie in [0, 1]")
        if self.task not in TASKS:
            errs.append(f"task must be one of {TASKS}")
        if self.task == "classification":
            if not isinstance(self.num_classes, int) or self.num_classes < 2:
                errs.append("classification needs num_classes >= 2")
        elif self.margin_enabled:
            errs.append("margin_enabled requires the classification task")
        if self.activation not in ACTIVATIONS:
            errs.append(f"activation must be one of {sorted(ACTIVATIONS)}")
        if not all(isinstance(h, int) and h >= 1 for h in self.encoder_hidden):
            errs.append("encoder_hidden must be a list of positive integers")
        if self.init not in INITS:
            errs.append(f"init must be one of {INITS}")
        for name in ("optimizer_theta", "optimizer_phi"):
            if getattr(self, name) not in ("adam", "sgd"):
                errs.append(f"{name} must be 'adam' or 'sgd'")
        return errs

    def validate(self):
        errs = self.errors()
        if errs:
            raise ValueError("invalid DAB config:\n  " + "\n  ".join(errs))

    @property
    def output_dim(self) -> int:
        return self.num_classes if self.task == "classification" else 1

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["encoder_hidden"] = list(self.encoder_hidden)
        return d


@dataclass
class DabModel:
    config: DabConfig
    input_dim: int
    params: dict
    codebook: Codebook
    normalization: Normalization | None = None

    @property
    def theta(self) -> dict:
        return self.params

    def encoder_layers(self):
        n = len(self.config.encoder_hidden)
        return [(self.params[f"enc.{i}.W"], self.params[f"enc.{i}.b"]) for i in range(n)]


def _weights(rng, shape, config):
    if config.init == "glorot_uniform":
        limit = np.sqrt(6.0 / (shape[0] + shape[1]))
        return rng.uniform(-limit, limit, size=shape)
    return dc.truncated_normal(rng, shape, config.init_stddev)


def init_model(input_dim: int, config: DabConfig, rng: np.random.Generator | None = None) -> DabModel:
    """Dense weights per ``config.init``, zero biases, codebook means ~ N(0, 0.1^2)."""
    config.validate()
    if rng is None:
        rng = _streams(config.seed)["init"]
    widths = [input_dim, *config.encoder_hidden]
    params = {}
    for i, (a, b) in enumerate(zip(widths[:-1], widths[1:])):
        params[f"enc.{i}.W"] = _weights(rng, (a, b), config)
        params[f"enc.{i}.b"] = np.zeros(b)
    params["enc.head.W"] = _weights(rng, (widths[-1], 2 * config.latent_dim), config)
    params["enc.head.b"] = np.zeros(2 * config.latent_dim)
    params["dec.W"] = _weights(rng, (config.latent_dim, config.output_dim), config)
    params["dec.b"] = np.zeros(config.output_dim)
    tensors = {k: dc.parameter(v, name=k) for k, v in params.items()}
    cb = Codebook.init(config.k, config.latent_dim, config.alpha, config.gamma, rng)
    return DabModel(config, input_dim, tensors, cb)


def _streams(seed: int) -> dict:
    init, shuffle, noise = np.random.SeedSequence(seed).spawn(3)
    return {"init": np.random.default_rng(init), "shuffle": np.random.default_rng(shuffle),
            "noise": np.random.default_rng(noise)}


# forward pieces -------------------------------------------------------------


def _as_batch(model: DabModel, x):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    x = np.atleast_2d(x)
    if x.shape[1] != model.input_dim:
        raise ValueError(f"input width {x.shape[1]} does not match encoder input {model.input_dim}")
    return x, single


def encode(model: DabModel, x) -> DiagGaussian:
    """Encoder distribution for one row (1-D input) or a batch (2-D input)."""
    xb, single = _as_batch(model, x)
    act = ACTIVATIONS[model.config.activation]
    h = dc.constant(xb)
    for W, b in model.encoder_layers():
        h = act(h @ W + b)
    out = h @ model.params["enc.head.W"] + model.params["enc.head.b"]
    L = model.config.latent_dim
    enc = from_raw(out[:, :L], out[:, L:])
    return enc[0] if single else enc


def decode(model: DabModel, z) -> dc.Tensor:
    z = dc.as_tensor(z)
    if z.ndim == 1:
        z = z.reshape(1, -1)
    return z @ model.params["dec.W"] + model.params["dec.b"]


def nll_terms(model: DabModel, outputs: dc.Tensor, y) -> dc.Tensor:
    """Per-row negative log-likelihood of targets under decoder outputs."""
    y = np.atleast_1d(np.asarray(y, dtype=np.float64))
    if model.config.task == "regression":
        return 0.5 * dc.square(outputs[:, 0] - dc.constant(y))
    c = model.config.num_classes
    labels = y.astype(np.int64)
    if np.any(labels != y) or np.any(labels < 0) or np.any(labels >= c):
        raise ValueError(f"labels must be integers in [0, {c})")
    onehot = np.eye(c)[labels]
    return dc.logsumexp(outputs, axis=-1) - (outputs * dc.constant(onehot)).sum(axis=-1)


def decode_nll(model: DabModel, z, y) -> dc.Tensor:
    """Squared error / 2 for regression, softmax cross-entropy for classes.

    A single latent vector gives a scalar; a batch gives one value per row.
    """
    z = dc.as_tensor(z)
    single = z.ndim == 1
    out = nll_terms(model, decode(model, z), y)
    return out[0] if single else out


def _predict_from_outputs(model: DabModel, outputs: np.ndarray) -> np.ndarray:
    if model.config.task == "regression":
        return outputs[:, 0]
    return np.argmax(outputs, axis=1)


@dataclass
class LossTerms:
    total: float
    nll: float
    mi: float
    distortion: float
    margin: float
    n: int
    correct: int | None = None


@dataclass
class _BatchPass:
    loss: dc.Tensor
    terms: LossTerms
    encoders: DiagGaussian
    rows: np.ndarray
    quantized: np.ndarray


def _dab_pass(model: DabModel, x, y, noise) -> _BatchPass:
    cfg, cb = model.config, model.codebook
    enc = encode(model, np.atleast_2d(x))
    noise = np.asarray(noise, dtype=np.float64).reshape(enc.mean.shape)
    dist = cb.distances(enc)
    rows = cbm.assignment_probs(dist.data, cb.pi, cb.alpha)
    z = sample(enc, noise)
    nll = nll_terms(model, decode(model, z), y).mean()
    per_point = cbm.expected_distortion(rows, dist)

    n = enc.mean.shape[0]
    quantized = np.ones(n, dtype=bool)
    margin = dc.constant(0.0)
    correct = None
    if cfg.task == "classification":
        pred = _predict_from_outputs(model, decode(model, enc.mean).data)
        hits = pred == np.asarray(y).astype(np.int64)
        correct = int(hits.sum())
        if cfg.margin_enabled:
            quantized = hits
            wrong = np.flatnonzero(~hits)
            if wrong.size:
                margin = dc.relu(cfg.u_lb - per_point[wrong]).mean()

    if quantized.any():
        q_idx = np.flatnonzero(quantized)
        mi = cbm.mutual_information(rows[q_idx], cb.pi)
        distortion = per_point[q_idx].mean() if q_idx.size < n else per_point.mean()
    else:
        mi = 0.0
        distortion = dc.constant(0.0)

    loss = nll + cfg.beta * mi + cfg.alpha * cfg.beta * distortion + margin
    terms = LossTerms(total=loss.item(), nll=nll.item(), mi=mi, distortion=distortion.item(),
                      margin=margin.item(), n=n, correct=correct)
    return _BatchPass(loss, terms, enc, rows, quantized)


def dab_loss(model: DabModel, x, y, noise):
    """Mini-batch DAB objective and its term breakdown.

    mean NLL of one reparameterized sample per row
      + beta * I(P_X; Q) + alpha * beta * mean expected KL to the codebook
      (+ hinge on the uncertainty of misclassified rows when the margin is on).

    Assignment probabilities use the committed marginal and carry no
    gradient.  With the margin on, only correctly classified rows enter the
    information and distortion terms.
    """
    p = _dab_pass(model, x, y, noise)
    return p.loss, p.terms


def vib_loss(model: DabModel, x, y, noise, beta: float, prior: DiagGaussian):
    """Plain VIB objective: mean NLL + beta * mean KL(encoder || prior)."""
    enc = encode(model, np.atleast_2d(x))
    noise = np.asarray(noise, dtype=np.float64).reshape(enc.mean.shape)
    z = sample(enc, noise)
    nll = nll_terms(model, decode(model, z), y).mean()
    return nll + beta * kl(enc, prior).mean()


# inference ------------------------------------------------------------------


def score(model: DabModel, x):
    """(predictions, uncertainties) for a batch, decoding at the encoder mean."""
    xb, _ = _as_batch(model, x)
    enc = encode(model, xb)
    outputs = decode(model, enc.mean).data
    return _predict_from_outputs(model, outputs), cbm.uncertainty(enc, model.codebook)


def predict_with_uncertainty(model: DabModel, x):
    """Single deterministic forward pass for one input row."""
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("predict_with_uncertainty takes a single feature vector")
    pred, unc = score(model, x[None, :])
    p = pred[0]
    return (int(p) if model.config.task == "classification" else float(p)), float(unc[0])


def distances(model: DabModel, x) -> np.ndarray:
    xb, _ = _as_batch(model, x)
    return model.codebook.distances(encode(model, xb)).data


# training -------------------------------------------------------------------


@dataclass
class EpochRecord:
    epoch: int
    total: float
    nll: float
    mi: float
    distortion: float
    margin: float
    accuracy: float | None


@dataclass
class TrainReport:
    epochs: list = field(default_factory=list)
    wall_clock: float = 0.0

    COLUMNS = ("epoch", "total", "nll", "mi", "distortion", "margin", "accuracy")

    def rows(self):
        for r in self.epochs:
            yield [r.epoch, r.total, r.nll, r.mi, r.distortion, r.margin,
                   "" if r.accuracy is None else r.accuracy]

    def to_csv(self) -> str:
        lines = [",".join(self.COLUMNS)]
        for row in self.rows():
            lines.append(",".join(v if isinstance(v, str) else repr(v) for v in row))
        return "\n".join(lines) + "\n"


class TrainingError(RuntimeError):
    pass


def _batches(n, batch_size, rng):
    perm = rng.permutation(n)
    return [perm[i:i + batch_size] for i in range(0, n, batch_size)]


def train(dataset: Dataset, config: DabConfig, log=None, model: DabModel | None = None):
    """Alternating minimization, one epoch = four phases.

    1. a pass of encoder/decoder gradient steps;
    2. soft assignments, recomputed per batch inside passes 1 and 3;
    3. a pass of centroid-mean gradient steps while accumulating the
       closed-form centroid variances, committed at the end of the pass;
    4. the marginal's moving average, updated per batch during pass 3 from
       the committed marginal and committed at the end of the epoch.
    """
    config.validate()
    if dataset.targets is None:
        raise ValueError("training needs a labelled dataset")
    if config.task == "classification" and dataset.num_classes is None:
        dataset = Dataset(dataset.features, dataset.targets, config.num_classes,
                          dataset.normalization)
    streams = _streams(config.seed)
    if model is None:
        model = init_model(dataset.width, config, streams["init"])
    model.normalization = dataset.normalization
    cb = model.codebook
    opt_theta = dc.make_optimizer(config.optimizer_theta, config.lr_theta)
    opt_phi = dc.make_optimizer(config.optimizer_phi, config.lr_phi)
    phi = {"codebook.means": cb.means}
    X, Y = dataset.features, dataset.targets
    n = len(dataset)
    report = TrainReport()
    start = time.perf_counter()

    for epoch in range(config.epochs):
        sums = np.zeros(5)
        correct = 0
        for bi, idx in enumerate(_batches(n, config.batch_size, streams["shuffle"])):
            noise = streams["noise"].normal(size=(idx.size, config.latent_dim))
            try:
                p = _dab_pass(model, X[idx], Y[idx], noise)
                grads = dc.grad(p.loss, model.params)
                opt_theta.step(model.params, grads)
            except (FloatingPointError, ValueError) as exc:
                raise TrainingError(f"epoch {epoch}, batch {bi}, phase theta: {exc}") from exc
            t = p.terms
            sums += t.n * np.array([t.total, t.nll, t.mi, t.distortion, t.margin])
            correct += t.correct or 0

        cbm.reset_covariances(cb)
        cb.pi_ma = cb.pi.copy()
        for bi, idx in enumerate(_batches(n, config.batch_size, streams["shuffle"])):
            noise = streams["noise"].normal(size=(idx.size, config.latent_dim))
            try:
                p = _dab_pass(model, X[idx], Y[idx], noise)
                q = np.flatnonzero(p.quantized)
                if q.size:
                    # a batch with nothing quantized leaves the codebook alone
                    grads = dc.grad(p.loss, phi)
                    cbm.update_covariances(cb, p.encoders[q], p.rows[q])
                    cbm.update_marginal(cb, p.rows[q])
                    opt_phi.step(phi, grads)
            except (FloatingPointError, ValueError) as exc:
                raise TrainingError(f"epoch {epoch}, batch {bi}, phase phi: {exc}") from exc
        cbm.commit_covariances(cb)
        cbm.commit_marginal(cb)

        avg = sums / n
        rec = EpochRecord(epoch, *map(float, avg),
                          accuracy=correct / n if config.task == "classification" else None)
        report.epochs.append(rec)
        if log is not None:
            log(rec)

    report.wall_clock = time.perf_counter() - start
    return model, report
