"""Generator-mediated reconstruction: latent-vector search against a
pretrained decoder, from-scratch generator-parameter optimization, and a
learned gradient-to-image inversion model."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .. import io as gio
from .. import models, rng
from .. import tensor as T
from ..adam import adam_init, adam_step
from ..fl import Dataset, Update
from ..metrics import evaluate_batch, flatten_update
from ..tensor import Graph
from .optim import AttackDiverged, AttackResult, OpGiaConfig, _distance_graph, _lr_at


@dataclass
class GeneratorSpec:
    latent_dim: int = 16
    label_embed_dim: int = 8  # 0 disables label conditioning
    base_channels: int = 16
    output_shape: tuple = (1, 8, 8)

    def __post_init__(self):
        c, h, w = self.output_shape
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be >= 1")
        if h % 4 or w % 4:
            raise ValueError(f"output spatial dims must be divisible by 4, got {h}x{w}")


def _kaiming(g, shape, fan_in):
    bound = math.sqrt(6.0 / fan_in)
    return g.uniform(-bound, bound, size=shape)


def init_decoder(gen: GeneratorSpec, num_classes: int, seed: int) -> dict:
    c, h, w = gen.output_shape
    ch = gen.base_channels
    h0, w0 = h // 4, w // 4
    zin = gen.latent_dim + gen.label_embed_dim
    p = {}
    p["dec.fc.weight"] = _kaiming(rng.stream(seed, 1), (ch * h0 * w0, zin), zin)
    p["dec.fc.bias"] = np.zeros(ch * h0 * w0)
    p["dec.t1.weight"] = _kaiming(rng.stream(seed, 2), (ch, ch // 2, 4, 4), ch * 16)
    p["dec.t1.bias"] = np.zeros(ch // 2)
    p["dec.t2.weight"] = _kaiming(rng.stream(seed, 3), (ch // 2, c, 4, 4), ch * 8)
    p["dec.t2.bias"] = np.zeros(c)
    if gen.label_embed_dim:
        p["dec.emb"] = rng.stream(seed, 4).normal(0, 0.5, size=(num_classes, gen.label_embed_dim))
    return p


def init_encoder(gen: GeneratorSpec, seed: int) -> dict:
    c, h, w = gen.output_shape
    ch = gen.base_channels
    h0, w0 = h // 4, w // 4
    p = {}
    p["enc.c1.weight"] = _kaiming(rng.stream(seed, 5), (ch // 2, c, 4, 4), c * 16)
    p["enc.c1.bias"] = np.zeros(ch // 2)
    p["enc.c2.weight"] = _kaiming(rng.stream(seed, 6), (ch, ch // 2, 4, 4), ch * 8)
    p["enc.c2.bias"] = np.zeros(ch)
    p["enc.fc.weight"] = _kaiming(rng.stream(seed, 7), (gen.latent_dim, ch * h0 * w0), ch * h0 * w0)
    p["enc.fc.bias"] = np.zeros(gen.latent_dim)
    return p


def decoder_forward(g: Graph, gen: GeneratorSpec, pvars: dict, z, labels=None):
    """Decode latent rows to raw [0,1] images (sigmoid output)."""
    c, h, w = gen.output_shape
    ch = gen.base_channels
    h0, w0 = h // 4, w // 4
    cur = z
    if gen.label_embed_dim:
        if labels is None:
            raise ValueError("conditioned generator needs labels")
        emb = T.take_rows(pvars["dec.emb"], np.asarray(labels, dtype=np.int64))
        cur = T.concat([cur, emb], axis=1)
    cur = T.bias_add(T.matmul(cur, T.transpose(pvars["dec.fc.weight"])), pvars["dec.fc.bias"])
    cur = T.relu(cur)
    cur = T.reshape(cur, (cur.value.shape[0], ch, h0, w0))
    cur = T.conv2d_input_grad(cur, pvars["dec.t1.weight"], (0, ch // 2, 2 * h0, 2 * w0), stride=2, pad=1)
    cur = T.relu(T.bias_add(cur, pvars["dec.t1.bias"]))
    cur = T.conv2d_input_grad(cur, pvars["dec.t2.weight"], (0, c, h, w), stride=2, pad=1)
    cur = T.bias_add(cur, pvars["dec.t2.bias"])
    return T.sigmoid(cur)


def encoder_forward(g: Graph, gen: GeneratorSpec, pvars: dict, x):
    ch = gen.base_channels
    cur = T.conv2d(x, pvars["enc.c1.weight"], stride=2, pad=1)
    cur = T.relu(T.bias_add(cur, pvars["enc.c1.bias"]))
    cur = T.conv2d(cur, pvars["enc.c2.weight"], stride=2, pad=1)
    cur = T.relu(T.bias_add(cur, pvars["enc.c2.bias"]))
    cur = T.flatten_batch(cur)
    return T.bias_add(T.matmul(cur, T.transpose(pvars["enc.fc.weight"])), pvars["enc.fc.bias"])


class PretrainError(RuntimeError):
    def __init__(self, message, curve):
        super().__init__(message)
        self.curve = curve


def pretrain_decoder(
    aux: Dataset,
    gen: GeneratorSpec,
    epochs: int = 60,
    seed: int = 0,
    lr: float = 3e-3,
    batch_size: int = 16,
    holdout_frac: float = 0.2,
    mse_threshold: float = 0.02,
):
    """Train an autoencoder on the auxiliary data; the decoder becomes the
    attack's pretrained generator.

    Returns (decoder params, encoder params, holdout mse). Raises
    PretrainError with the loss curve when the held-out reconstruction MSE
    misses the threshold.
    """
    if tuple(aux.images.shape[1:]) != tuple(gen.output_shape):
        raise ValueError(
            f"aux images {aux.images.shape[1:]} do not match generator output "
            f"{gen.output_shape}"
        )
    num_classes = int(aux.labels.max()) + 1
    params = {**init_decoder(gen, num_classes, seed), **init_encoder(gen, seed)}
    n_hold = max(1, int(aux.n * holdout_frac))
    order = rng.stream(seed, 11).permutation(aux.n)
    hold, train = order[:n_hold], order[n_hold:]
    state = adam_init(params)
    curve = []
    for epoch in range(epochs):
        perm = rng.stream(seed, 12, epoch).permutation(train)
        losses = []
        for start in range(0, len(perm), batch_size):
            idx = perm[start : start + batch_size]
            x = aux.images[idx]
            g = Graph()
            pvars = {n: g.leaf(v, n) for n, v in params.items()}
            xv = g.leaf(x, grad=False)
            z = encoder_forward(g, gen, pvars, xv)
            recon = decoder_forward(g, gen, pvars, z, aux.labels[idx])
            loss = T.mse(recon, xv)
            grads = g.backward(loss)
            params = adam_step(state, params, {n: grads[n] for n in params}, lr)
            losses.append(float(loss.value))
        curve.append(float(np.mean(losses)))

    def recon_mse(idx):
        g = Graph()
        pvars = {n: g.leaf(v, n, grad=False) for n, v in params.items()}
        xv = g.leaf(aux.images[idx], grad=False)
        z = encoder_forward(g, gen, pvars, xv)
        recon = decoder_forward(g, gen, pvars, z, aux.labels[idx])
        return float(np.mean((recon.value - aux.images[idx]) ** 2))

    holdout_mse = recon_mse(hold)
    if holdout_mse >= mse_threshold:
        raise PretrainError(
            f"decoder pretraining did not converge: held-out MSE "
            f"{holdout_mse:.4f} >= {mse_threshold}", curve,
        )
    decoder = {k: v for k, v in params.items() if k.startswith("dec.")}
    encoder = {k: v for k, v in params.items() if k.startswith("enc.")}
    decoder["__train_mse__"] = np.asarray(recon_mse(train))
    return decoder, encoder, holdout_mse


def _gen_objective(g, spec, params, gen, dec_pvars, z, labels, update, leaked_unit, cfg, mean, std):
    raw = decoder_forward(g, gen, dec_pvars, z, labels)
    normed = T.channel_affine(raw, 1.0 / std, -mean / std)
    _, grad_vars = models.grads_graph(
        g, spec, {n: g.leaf(v, n, grad=False) for n, v in params.items()}, normed, labels
    )
    obj = _distance_graph(g, cfg.distance, update.tensors, leaked_unit, grad_vars)
    if cfg.tv_weight > 0:
        b, c, h, w = raw.value.shape
        obj = T.add(obj, T.scale(T.total_variation(raw), cfg.tv_weight / (b * c * (h - 1) * (w - 1))))
    return obj, raw


def _normalize_leaked(tensors):
    norm = np.sqrt(sum(float((v * v).sum()) for v in tensors.values()))
    if norm == 0:
        raise ValueError("leaked gradients have zero norm")
    return {k: v / norm for k, v in tensors.items()}


def latent_z_attack(
    update: Update,
    spec: models.ModelSpec,
    params: dict,
    gen: GeneratorSpec,
    decoder: dict,
    labels,
    cfg: OpGiaConfig,
    ground_truth=None,
) -> AttackResult:
    """Search the pretrained decoder's latent space by gradient matching.

    Only z moves; the decoder stays fixed, so the result is flagged
    semantic-level: it lives on the decoder's manifold.
    """
    cfg.validate()
    labels = np.asarray(labels, dtype=np.int64)
    batch = int(update.meta["B"])
    if labels.shape[0] != batch:
        raise ValueError("label count does not match update batch size")
    mean = np.asarray(update.meta["mean"])
    std = np.asarray(update.meta["std"])
    decoder = {k: v for k, v in decoder.items() if not k.startswith("__")}
    leaked_unit = _normalize_leaked(update.tensors)

    z = rng.stream(cfg.seed, 21).standard_normal((batch, gen.latent_dim))
    state = adam_init({"z": z})
    best = (np.inf, z.copy(), None)
    trajectory = []
    for i in range(cfg.iterations):
        g = Graph()
        zv = g.leaf(z, "z")
        dec_pvars = {n: g.leaf(v, n, grad=False) for n, v in decoder.items()}
        obj, raw = _gen_objective(
            g, spec, params, gen, dec_pvars, zv, labels, update, leaked_unit, cfg, mean, std
        )
        val = float(obj.value)
        if not np.isfinite(val):
            raise AttackDiverged(i, _lr_at(cfg, i))
        trajectory.append(val)
        if val < best[0]:
            best = (val, z.copy(), raw.value.copy())
        back = g.backward(obj)
        z = adam_step(state, {"z": z}, {"z": back["z"]}, _lr_at(cfg, i))["z"]

    x_hat = best[2]
    result = AttackResult(
        x_hat=x_hat,
        labels=labels,
        final_objective=best[0],
        trajectory=trajectory,
        metrics=None,
        seed=cfg.seed,
        config=asdict(cfg),
        flags={"semantic_level": True, "method": "latent-z"},
    )
    if ground_truth is not None:
        result.metrics = evaluate_batch(ground_truth, x_hat)
    return result


def gen_w_attack(
    update: Update,
    spec: models.ModelSpec,
    params: dict,
    gen: GeneratorSpec,
    labels,
    cfg: OpGiaConfig,
    ground_truth=None,
) -> AttackResult:
    """Optimize a fresh generator's parameters with the latent vector fixed;
    pixel-level counterpart of the latent search."""
    cfg.validate()
    labels = np.asarray(labels, dtype=np.int64)
    batch = int(update.meta["B"])
    if labels.shape[0] != batch:
        raise ValueError("label count does not match update batch size")
    mean = np.asarray(update.meta["mean"])
    std = np.asarray(update.meta["std"])
    num_classes = int(update.meta["num_classes"])
    leaked_unit = _normalize_leaked(update.tensors)

    weights = init_decoder(gen, num_classes, cfg.seed)
    z_fixed = rng.stream(cfg.seed, 22).standard_normal((batch, gen.latent_dim))
    state = adam_init(weights)
    best = (np.inf, None)
    trajectory = []
    for i in range(cfg.iterations):
        g = Graph()
        dec_pvars = {n: g.leaf(v, n) for n, v in weights.items()}
        zv = g.leaf(z_fixed, grad=False)
        obj, raw = _gen_objective(
            g, spec, params, gen, dec_pvars, zv, labels, update, leaked_unit, cfg, mean, std
        )
        val = float(obj.value)
        if not np.isfinite(val):
            raise AttackDiverged(i, _lr_at(cfg, i))
        trajectory.append(val)
        if val < best[0]:
            best = (val, raw.value.copy())
        back = g.backward(obj)
        weights = adam_step(state, weights, {n: back[n] for n in weights}, _lr_at(cfg, i))

    x_hat = best[1]
    result = AttackResult(
        x_hat=x_hat,
        labels=labels,
        final_objective=best[0],
        trajectory=trajectory,
        metrics=None,
        seed=cfg.seed,
        config=asdict(cfg),
        flags={"method": "gen-w"},
    )
    if ground_truth is not None:
        result.metrics = evaluate_batch(ground_truth, x_hat)
    return result


# ---------------------------------------------------------------------------
# learned inversion model (gradients -> images)
# ---------------------------------------------------------------------------


@dataclass
class InversionModel:
    grad_dim: int  # flattened leaked-gradient length
    input_dim: int  # after projection (= grad_dim when small enough)
    batch_size: int
    output_shape: tuple  # (C, H, W)
    hidden: tuple = (256,)
    projection_seed: int = 0
    params: dict | None = None
    train_curve: list = field(default_factory=list)

    def projection(self):
        if self.input_dim == self.grad_dim:
            return None
        g = rng.stream(self.projection_seed, 31)
        return g.normal(0, 1.0 / math.sqrt(self.input_dim), size=(self.grad_dim, self.input_dim))


MAX_PROJECTED_DIM = 2048


def make_inversion_model(spec, params, batch_size, output_shape, hidden=(256,), projection_seed=0):
    grad_dim = sum(v.size for v in params.values())
    return InversionModel(
        grad_dim=grad_dim,
        input_dim=min(grad_dim, MAX_PROJECTED_DIM),
        batch_size=batch_size,
        output_shape=tuple(output_shape),
        hidden=tuple(hidden),
        projection_seed=projection_seed,
    )


def _inv_init(inv: InversionModel, seed: int) -> dict:
    out_dim = inv.batch_size * int(np.prod(inv.output_shape))
    dims = [inv.input_dim, *inv.hidden, out_dim]
    p = {}
    for i in range(len(dims) - 1):
        p[f"inv.l{i}.weight"] = _kaiming(rng.stream(seed, 41, i), (dims[i + 1], dims[i]), dims[i])
        p[f"inv.l{i}.bias"] = np.zeros(dims[i + 1])
    return p


def _inv_forward(g: Graph, inv: InversionModel, pvars: dict, u):
    cur = u
    n_layers = len(inv.hidden) + 1
    for i in range(n_layers):
        cur = T.bias_add(T.matmul(cur, T.transpose(pvars[f"inv.l{i}.weight"])), pvars[f"inv.l{i}.bias"])
        if i < n_layers - 1:
            cur = T.relu(cur)
    return cur


def _project(inv: InversionModel, flat_grad: np.ndarray) -> np.ndarray:
    proj = inv.projection()
    return flat_grad if proj is None else flat_grad @ proj


class InversionTrainingError(RuntimeError):
    def __init__(self, message, curve):
        super().__init__(message)
        self.curve = curve


def train_inversion_model(
    aux: Dataset,
    spec: models.ModelSpec,
    params: dict,
    batch_size: int,
    inv: InversionModel,
    epochs: int = 80,
    seed: int = 0,
    lr: float = 1e-3,
    minibatch: int = 32,
) -> InversionModel:
    """Fit the gradient-to-batch regression on auxiliary data.

    Training pairs are built by running FedSGD-style rounds on aux batches
    at the target parameters; inputs are (projected) flattened gradients,
    targets the flattened raw batches.
    """
    if inv.batch_size != batch_size:
        raise ValueError("inversion model batch size mismatch")
    draw = rng.stream(seed, 42)
    n_examples = max(64, 2 * aux.n // batch_size)
    inputs, targets = [], []
    for _ in range(n_examples):
        idx = draw.choice(aux.n, size=batch_size, replace=False)
        x = aux.normalize(aux.images[idx])
        _, grads = models.loss_and_grads(spec, params, x, aux.labels[idx])
        inputs.append(_project(inv, flatten_update(grads)))
        targets.append(aux.images[idx].reshape(-1))
    u = np.stack(inputs)
    t = np.stack(targets)

    weights = inv.params if inv.params is not None else _inv_init(inv, seed)
    state = adam_init(weights)
    curve = []
    for epoch in range(epochs):
        perm = rng.stream(seed, 43, epoch).permutation(len(u))
        losses = []
        for start in range(0, len(perm), minibatch):
            sel = perm[start : start + minibatch]
            g = Graph()
            pvars = {n: g.leaf(v, n) for n, v in weights.items()}
            pred = _inv_forward(g, inv, pvars, g.leaf(u[sel], grad=False))
            loss = T.mse(pred, g.leaf(t[sel], grad=False))
            back = g.backward(loss)
            weights = adam_step(state, weights, {n: back[n] for n in weights}, lr)
            losses.append(float(loss.value))
        curve.append(float(np.mean(losses)))
        if not np.isfinite(curve[-1]) or (len(curve) > 4 and curve[-1] > 4 * min(curve)):
            raise InversionTrainingError(
                f"inversion training diverged at epoch {epoch}", curve
            )
    inv.params = weights
    inv.train_curve = curve
    return inv


def invert_with_model(inv: InversionModel, update: Update, ground_truth=None) -> AttackResult:
    """Single forward pass through the trained inversion model."""
    if inv.params is None:
        raise ValueError("inversion model is not trained")
    flat = flatten_update(update.tensors)
    if flat.shape[0] != inv.grad_dim:
        raise ValueError(
            f"gradient length {flat.shape[0]} does not match the model's "
            f"training configuration ({inv.grad_dim})"
        )
    g = Graph()
    pvars = {n: g.leaf(v, n, grad=False) for n, v in inv.params.items()}
    pred = _inv_forward(g, inv, pvars, g.leaf(_project(inv, flat)[None, :], grad=False))
    x_hat = np.clip(pred.value.reshape((inv.batch_size,) + inv.output_shape), 0.0, 1.0)
    result = AttackResult(
        x_hat=x_hat,
        labels=np.full(inv.batch_size, -1, dtype=np.int64),
        final_objective=0.0,
        trajectory=[],
        metrics=None,
        seed=inv.projection_seed,
        config={"method": "lti"},
        flags={"method": "lti"},
    )
    if ground_truth is not None:
        result.metrics = evaluate_batch(ground_truth, x_hat)
    return result


def save_generator(path, gen: GeneratorSpec, decoder: dict):
    meta = {
        "latent_dim": gen.latent_dim,
        "label_embed_dim": gen.label_embed_dim,
        "base_channels": gen.base_channels,
        "output_shape": list(gen.output_shape),
    }
    gio.write_tensors(path, {k: v for k, v in decoder.items() if not k.startswith("__")},
                      gio.MAGIC_GENERATOR, meta)


def load_generator(path):
    tensors, meta = gio.read_tensors(path, gio.MAGIC_GENERATOR)
    gen = GeneratorSpec(
        latent_dim=meta["latent_dim"],
        label_embed_dim=meta["label_embed_dim"],
        base_channels=meta["base_channels"],
        output_shape=tuple(meta["output_shape"]),
    )
    return gen, tensors
