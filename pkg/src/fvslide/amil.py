"""Attention-MIL classifier over bags of Fisher vectors.

The model embeds each instance, pools the bag with learned softmax attention
(the "mlp" head replaces attention with mean pooling), and classifies the
pooled vector:

    h_i    = relu(embed_W @ fv_i + embed_b)
    e_i    = attn_w . tanh(attn_V @ h_i)
    a      = softmax(e)
    z      = sum_i a_i * h_i
    logits = head_W @ z + head_b

Pooling is permutation-invariant. Training uses softmax cross-entropy with
mixup (loss interpolation), per-bag scale + jitter augmentation, and AdamW
with decoupled weight decay. Gradients are computed by hand-written
reverse-mode accumulation through this exact graph and are verified against
central finite differences in the test suite.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .data import DataFormatError, Dataset, FORMAT_VERSION, SlideRepresentation, ValidationError
from .seeds import child_seed, make_rng

MODEL_MAGIC = b"WSAM"
HEAD_KINDS = ("amil", "mlp")
PARAM_NAMES = ("embed_W", "embed_b", "attn_V", "attn_w", "head_W", "head_b")


@dataclass(frozen=True)
class TrainConfig:
    lr: float = 0.001
    weight_decay: float = 0.0001
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    epochs: int = 40
    batch_size: int = 16
    seed: int = 0
    scale_low: float = 0.9
    scale_high: float = 1.0
    scale_per_instance: bool = False
    jitter_level: float = 0.01
    jitter_dist: str = "uniform"  # or "gaussian"
    mixup_alpha: float = 0.2
    hidden: int = 256
    attn_dim: int = 128
    head: str = "amil"

    def __post_init__(self):
        if not (self.lr > 0):
            raise ValidationError(f"lr must be > 0, got {self.lr}")
        if self.weight_decay < 0:
            raise ValidationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not (0 < self.scale_low <= self.scale_high):
            raise ValidationError(f"scale range ({self.scale_low}, {self.scale_high}) invalid")
        if self.jitter_level < 0:
            raise ValidationError(f"jitter_level must be >= 0, got {self.jitter_level}")
        if not (self.mixup_alpha > 0):
            raise ValidationError(f"mixup_alpha must be > 0, got {self.mixup_alpha}")
        if self.jitter_dist not in ("uniform", "gaussian"):
            raise ValidationError(f"jitter_dist must be uniform or gaussian, got {self.jitter_dist!r}")
        if self.head not in HEAD_KINDS:
            raise ValidationError(f"head must be one of {HEAD_KINDS}, got {self.head!r}")
        if self.epochs < 0 or self.batch_size < 1 or self.hidden < 1 or self.attn_dim < 1:
            raise ValidationError("epochs must be >= 0; batch_size/hidden/attn_dim >= 1")


@dataclass(frozen=True)
class AmilModel:
    embed_W: np.ndarray  # (hidden, input_dim)
    embed_b: np.ndarray  # (hidden,)
    attn_V: np.ndarray  # (attn_dim, hidden)
    attn_w: np.ndarray  # (attn_dim,)
    head_W: np.ndarray  # (n_classes, hidden)
    head_b: np.ndarray  # (n_classes,)
    pooling: str = "attention"  # "attention" (amil head) or "mean" (mlp head)

    @property
    def input_dim(self) -> int:
        return self.embed_W.shape[1]

    @property
    def hidden(self) -> int:
        return self.embed_W.shape[0]

    @property
    def attn_dim(self) -> int:
        return self.attn_V.shape[0]

    @property
    def n_classes(self) -> int:
        return self.head_W.shape[0]

    def params(self) -> dict[str, np.ndarray]:
        return {name: getattr(self, name) for name in PARAM_NAMES}

    def with_params(self, params: dict[str, np.ndarray]) -> "AmilModel":
        return replace(self, **params)


def init_model(
    input_dim: int, hidden: int, attn_dim: int, n_classes: int, seed: int, head: str = "amil"
) -> AmilModel:
    """Glorot-uniform weights, zero biases, fully determined by the seed."""
    if head not in HEAD_KINDS:
        raise ValidationError(f"head must be one of {HEAD_KINDS}, got {head!r}")
    rng = make_rng(seed)

    def glorot(fan_out, fan_in):
        limit = np.sqrt(6.0 / (fan_in + fan_out))
        return rng.uniform(-limit, limit, size=(fan_out, fan_in))

    return AmilModel(
        embed_W=glorot(hidden, input_dim),
        embed_b=np.zeros(hidden),
        attn_V=glorot(attn_dim, hidden),
        attn_w=glorot(1, attn_dim)[0],
        head_W=glorot(n_classes, hidden),
        head_b=np.zeros(n_classes),
        pooling="attention" if head == "amil" else "mean",
    )


def _bag_matrix(bag) -> np.ndarray:
    if isinstance(bag, SlideRepresentation):
        return np.asarray(bag.fvs, dtype=np.float64)
    return np.asarray(bag, dtype=np.float64)


def _softmax(v: np.ndarray) -> np.ndarray:
    shifted = v - v.max()
    e = np.exp(shifted)
    return e / e.sum()


def _forward_trace(model: AmilModel, x: np.ndarray) -> dict:
    """Forward pass keeping every intermediate needed for backprop."""
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValidationError(f"bag shape {x.shape} does not match input_dim {model.input_dim}")
    pre = x @ model.embed_W.T + model.embed_b  # (k, hidden)
    h = np.maximum(pre, 0.0)
    if model.pooling == "attention":
        u = np.tanh(h @ model.attn_V.T)  # (k, attn_dim)
        e = u @ model.attn_w  # (k,)
        a = _softmax(e)
    else:
        u = None
        a = np.full(x.shape[0], 1.0 / x.shape[0])
    z = a @ h  # (hidden,)
    logits = model.head_W @ z + model.head_b
    return {"x": x, "pre": pre, "h": h, "u": u, "a": a, "z": z, "logits": logits}


def forward(model: AmilModel, bag) -> tuple[np.ndarray, np.ndarray]:
    """Return (logits, attention) for one bag (array or SlideRepresentation)."""
    trace = _forward_trace(model, _bag_matrix(bag))
    return trace["logits"], trace["a"]


def predict_proba(model: AmilModel, bags) -> np.ndarray:
    """Class probabilities, one row per bag."""
    out = np.empty((len(bags), model.n_classes))
    for i, bag in enumerate(bags):
        logits, _ = forward(model, bag)
        out[i] = _softmax(logits)
    return out


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    shifted = logits - logits.max()
    return shifted - np.log(np.exp(shifted).sum())


def loss_and_grads(model, bags, targets, mixup_pairs=None, slide_ids=None):
    """Mean cross-entropy over the batch and gradients for every parameter.

    `mixup_pairs[i]`, when given, is (target_b, lam) for a bag that is already
    the lam-mix of two inputs; the loss interpolates lam*CE(y_a) +
    (1-lam)*CE(y_b), which equals CE against the mixed one-hot target.
    """
    n_batch = len(bags)
    if n_batch == 0:
        raise ValidationError("empty batch")
    targets = np.asarray(targets, dtype=np.int64)
    grads = {name: np.zeros_like(p) for name, p in model.params().items()}
    total = 0.0

    for i, bag in enumerate(bags):
        x = _bag_matrix(bag)
        t = _forward_trace(model, x)
        y_mix = np.zeros(model.n_classes)
        logp = _log_softmax(t["logits"])
        y_a = int(targets[i])
        if mixup_pairs is not None and mixup_pairs[i] is not None:
            y_b, lam = mixup_pairs[i]
            loss_i = -(lam * logp[y_a] + (1.0 - lam) * logp[int(y_b)])
            y_mix[y_a] += lam
            y_mix[int(y_b)] += 1.0 - lam
        else:
            loss_i = -logp[y_a]
            y_mix[y_a] = 1.0
        if not np.isfinite(loss_i):
            sid = slide_ids[i] if slide_ids is not None else f"batch index {i}"
            raise ValidationError(f"non-finite loss for slide {sid}")
        total += loss_i

        p = np.exp(logp)
        dlogits = p - y_mix
        grads["head_W"] += np.outer(dlogits, t["z"])
        grads["head_b"] += dlogits
        dz = model.head_W.T @ dlogits
        a, h = t["a"], t["h"]
        da = h @ dz
        dh = np.outer(a, dz)
        if model.pooling == "attention":
            u = t["u"]
            de = a * (da - float(a @ da))  # softmax jacobian-vector product
            grads["attn_w"] += u.T @ de
            du = np.outer(de, model.attn_w)
            dupre = du * (1.0 - u**2)
            grads["attn_V"] += dupre.T @ h
            dh += dupre @ model.attn_V
        dpre = dh * (t["pre"] > 0)
        grads["embed_W"] += dpre.T @ x
        grads["embed_b"] += dpre.sum(axis=0)

    for name in grads:
        grads[name] /= n_batch
    return total / n_batch, grads


# ---------------------------------------------------------------------------
# AdamW
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    t: int = 0


def init_adam_state(model: AmilModel) -> AdamState:
    return AdamState(
        m={k: np.zeros_like(p) for k, p in model.params().items()},
        v={k: np.zeros_like(p) for k, p in model.params().items()},
        t=0,
    )


def adamw_step(model, grads, state, config) -> tuple[AmilModel, AdamState]:
    """One AdamW step: decoupled decay w *= (1 - lr*wd), applied separately
    from the bias-corrected moment update."""
    t = state.t + 1
    new_params, new_m, new_v = {}, {}, {}
    for name, p in model.params().items():
        g = grads[name]
        m = config.beta1 * state.m[name] + (1.0 - config.beta1) * g
        v = config.beta2 * state.v[name] + (1.0 - config.beta2) * g * g
        m_hat = m / (1.0 - config.beta1**t)
        v_hat = v / (1.0 - config.beta2**t)
        decayed = p * (1.0 - config.lr * config.weight_decay)
        new_params[name] = decayed - config.lr * m_hat / (np.sqrt(v_hat) + config.eps)
        new_m[name], new_v[name] = m, v
    return model.with_params(new_params), AdamState(m=new_m, v=new_v, t=t)


# ---------------------------------------------------------------------------
# Augmentations
# ---------------------------------------------------------------------------


def augment_bag(bag, config: TrainConfig, rng: np.random.Generator) -> np.ndarray:
    """Training-time perturbation: one uniform scale factor per bag (or per
    instance), then i.i.d. jitter noise per coordinate."""
    x = _bag_matrix(bag)
    if config.scale_per_instance:
        s = rng.uniform(config.scale_low, config.scale_high, size=(x.shape[0], 1))
    else:
        s = rng.uniform(config.scale_low, config.scale_high)
    out = x * s
    if config.jitter_dist == "uniform":
        out = out + rng.uniform(-config.jitter_level, config.jitter_level, size=x.shape)
    else:
        out = out + rng.normal(0.0, config.jitter_level, size=x.shape)
    return out


def mix_bags(bag_a, bag_b, lam: float) -> np.ndarray:
    """Instance-wise convex combination; bags are in canonical cluster order."""
    a, b = _bag_matrix(bag_a), _bag_matrix(bag_b)
    if a.shape != b.shape:
        raise ValidationError(f"cannot mix bags of shapes {a.shape} and {b.shape}")
    return lam * a + (1.0 - lam) * b


def mixup_sample(bag_a, bag_b, alpha: float, rng: np.random.Generator):
    """Draw lam ~ Beta(alpha, alpha) and return (mixed bag, lam)."""
    lam = float(rng.beta(alpha, alpha))
    return mix_bags(bag_a, bag_b, lam), lam


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class TrainedClassifier:
    model: AmilModel
    config: TrainConfig
    n_classes: int
    class_names: tuple[str, ...]
    train_loss: tuple[float, ...] = ()
    val_accuracy: tuple[float, ...] = ()
    best_epoch: int = 0  # 0 means the initial model (epochs=0 or no val split)


def _accuracy(model, bags, labels) -> float:
    if len(bags) == 0:
        return 0.0
    preds = predict_proba(model, bags).argmax(axis=1)
    return float(np.mean(preds == labels))


def train(dataset: Dataset, config: TrainConfig) -> TrainedClassifier:
    """Train on the dataset's train split, selecting the epoch with the best
    validation accuracy (ties go to the later epoch). Fully seeded: the same
    dataset and config give a bit-identical classifier.
    """
    train_idx = dataset.indices("train")
    val_idx = dataset.indices("val")
    if train_idx.size == 0:
        raise ValidationError("train split is empty")
    labels = np.asarray(dataset.labels)
    if np.unique(labels[train_idx]).size < 2:
        raise ValidationError("single-class train split")

    bags = [np.asarray(r.fvs, dtype=np.float64) for r in dataset.representations]
    ids = [r.slide_id for r in dataset.representations]
    input_dim = bags[train_idx[0]].shape[1]
    n_classes = len(dataset.class_names)

    model = init_model(
        input_dim, config.hidden, config.attn_dim, n_classes,
        seed=child_seed(config.seed, "init"), head=config.head,
    )
    state = init_adam_state(model)
    rng = make_rng(child_seed(config.seed, "train-loop"))

    val_bags = [bags[i] for i in val_idx]
    val_labels = labels[val_idx]

    best_model, best_acc, best_epoch = model, -1.0, 0
    loss_history: list[float] = []
    acc_history: list[float] = []
    for epoch in range(1, config.epochs + 1):
        order = train_idx[rng.permutation(train_idx.size)]
        batch_losses = []
        for start in range(0, order.size, config.batch_size):
            batch = order[start : start + config.batch_size]
            aug = [augment_bag(bags[i], config, rng) for i in batch]
            partners = rng.permutation(len(batch))
            mixed, pairs = [], []
            for j in range(len(batch)):
                mixed_bag, lam = mixup_sample(aug[j], aug[partners[j]], config.mixup_alpha, rng)
                mixed.append(mixed_bag)
                pairs.append((int(labels[batch[partners[j]]]), lam))
            loss, grads = loss_and_grads(
                model, mixed, labels[batch], mixup_pairs=pairs,
                slide_ids=[ids[i] for i in batch],
            )
            model, state = adamw_step(model, grads, state, config)
            batch_losses.append(loss)
        epoch_loss = float(np.mean(batch_losses))
        if not np.isfinite(epoch_loss):
            raise ValidationError(f"non-finite training loss at epoch {epoch}")
        loss_history.append(epoch_loss)

        if val_idx.size > 0:
            acc = _accuracy(model, val_bags, val_labels)
            acc_history.append(acc)
            if acc >= best_acc:  # >= : later epoch wins ties
                best_model, best_acc, best_epoch = model, acc, epoch

    if val_idx.size == 0:  # no validation split: keep the final model
        best_model, best_epoch = model, config.epochs

    return TrainedClassifier(
        model=best_model,
        config=config,
        n_classes=n_classes,
        class_names=dataset.class_names,
        train_loss=tuple(loss_history),
        val_accuracy=tuple(acc_history),
        best_epoch=best_epoch,
    )


# ---------------------------------------------------------------------------
# Model file format: magic "WSAM" | u32 version | u32 head kind |
# per tensor (fixed order): u32 ndim | u32*ndim shape | float64 data, LE
# ---------------------------------------------------------------------------


def write_model(model: AmilModel, path: str | Path) -> None:
    parts = [MODEL_MAGIC, struct.pack("<II", FORMAT_VERSION, 0 if model.pooling == "attention" else 1)]
    for name in PARAM_NAMES:
        tensor = np.ascontiguousarray(model.params()[name], dtype="<f8")
        parts.append(struct.pack("<I", tensor.ndim))
        parts.append(struct.pack(f"<{tensor.ndim}I", *tensor.shape))
        parts.append(tensor.tobytes())
    Path(path).write_bytes(b"".join(parts))


def read_model(path: str | Path) -> AmilModel:
    path = Path(path)
    data = path.read_bytes()
    if len(data) < 12:
        raise DataFormatError(f"{path}: truncated")
    if data[:4] != MODEL_MAGIC:
        raise DataFormatError(f"{path}: not a model file")
    version, head_kind = struct.unpack_from("<II", data, 4)
    if version != FORMAT_VERSION:
        raise DataFormatError(f"{path}: unsupported version {version}")
    if head_kind not in (0, 1):
        raise DataFormatError(f"{path}: unknown head kind {head_kind}")
    offset = 12
    tensors = {}
    for name in PARAM_NAMES:
        if offset + 4 > len(data):
            raise DataFormatError(f"{path}: truncated")
        (ndim,) = struct.unpack_from("<I", data, offset)
        offset += 4
        if ndim > 2 or offset + 4 * ndim > len(data):
            raise DataFormatError(f"{path}: truncated")
        shape = struct.unpack_from(f"<{ndim}I", data, offset)
        offset += 4 * ndim
        count = int(np.prod(shape)) if ndim else 1
        if offset + 8 * count > len(data):
            raise DataFormatError(f"{path}: truncated")
        tensors[name] = np.frombuffer(data, dtype="<f8", count=count, offset=offset).reshape(shape).copy()
        offset += 8 * count
    if offset != len(data):
        raise DataFormatError(f"{path}: trailing bytes")
    return AmilModel(pooling="attention" if head_kind == 0 else "mean", **tensors)
