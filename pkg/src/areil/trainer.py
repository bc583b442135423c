"""Multi-task optimization loop.

Each epoch shuffles both domains' training positives, samples fresh uniform
negatives, and steps jointly over both domains (the shorter domain cycles).
Validation NDCG@20 (mean of the two domains) drives early stopping; the
best-metric parameter snapshot is restored at the end.
"""

import logging
import struct
import time
from dataclasses import dataclass

import numpy as np

from areil import evalkit
from areil.config import parse_config_text
from areil.errors import (
    CheckpointError,
    CheckpointShapeError,
    MagicError,
    NumericError,
    SamplingError,
    TruncatedCheckpointError,
)
from areil.model import Model, binary_cross_entropy, stable_sigmoid

log = logging.getLogger("areil.trainer")

CHECKPOINT_MAGIC = b"AREIL001"

HISTORY_COLUMNS = (
    "epoch", "l_rec", "l_cls", "l_reg", "l_total", "grl_lambda",
    "recall_x", "ndcg_x", "recall_y", "ndcg_y", "seconds",
)


@dataclass
class EpochRecord:
    epoch: int
    l_rec: float
    l_cls: float
    l_reg: float
    l_total: float
    grl_lambda: float
    recall_x: float
    ndcg_x: float
    recall_y: float
    ndcg_y: float
    seconds: float

    @property
    def stop_metric(self):
        return 0.5 * (self.ndcg_x + self.ndcg_y)


def grl_lambda(progress, lambda_max):
    """Warm-up schedule: 0 at progress 0, approaching lambda_max at 1."""
    if not 0.0 <= progress <= 1.0:
        raise ValueError(f"progress must lie in [0, 1], got {progress}")
    return lambda_max * (2.0 / (1.0 + np.exp(-10.0 * progress)) - 1.0)


def recommendation_loss(scores, labels):
    """Mean logistic cross-entropy over raw scores.

    Returns (loss, d_scores); the gradient of the mean w.r.t. each score is
    (sigmoid(score) - label) / batch.
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.float64)
    probs = stable_sigmoid(scores)
    loss = binary_cross_entropy(probs, labels)
    return loss, (probs - labels) / labels.shape[0]


def positives_by_user(pairs, num_users):
    sets = [set() for _ in range(num_users)]
    for u, i in pairs:
        sets[u].add(i)
    return sets


def sample_negatives(positives, user_positive_sets, num_items, n, rng):
    """n uniform negatives per positive, rejecting the user's training items."""
    if n < 1:
        raise ValueError("need at least one negative per positive")
    pos_users = np.fromiter((u for u, _ in positives), dtype=np.int64)
    for u in np.unique(pos_users):
        if len(user_positive_sets[u]) >= num_items:
            raise SamplingError(
                f"user {u} has interacted with the entire catalog ({num_items} items)"
            )
    users = np.repeat(pos_users, n)
    items = rng.integers(0, num_items, size=users.shape[0])
    pending = np.flatnonzero(
        [items[k] in user_positive_sets[users[k]] for k in range(users.shape[0])]
    )
    while pending.shape[0]:
        items[pending] = rng.integers(0, num_items, size=pending.shape[0])
        still = [k for k in pending if items[k] in user_positive_sets[users[k]]]
        pending = np.asarray(still, dtype=np.int64)
    return users, items


def _epoch_triples(split, tag, user_positive_sets, num_items, n_neg, rng):
    """Shuffled positive+negative triples for one domain, one epoch."""
    positives = split.train[tag]
    pos_users = np.fromiter((u for u, _ in positives), dtype=np.int64)
    pos_items = np.fromiter((i for _, i in positives), dtype=np.int64)
    neg_users, neg_items = sample_negatives(
        positives, user_positive_sets, num_items, n_neg, rng
    )
    users = np.concatenate([pos_users, neg_users])
    items = np.concatenate([pos_items, neg_items])
    labels = np.concatenate([
        np.ones(pos_users.shape[0]), np.zeros(neg_users.shape[0])
    ])
    order = rng.permutation(users.shape[0])
    return users[order], items[order], labels[order]


def training_step(model, graphs, batch, cfg, grl_coef):
    """One joint forward/backward over both domains plus one Adam update."""
    model.store.zero_grads()
    values = model.compute(graphs, batch, grl_coef, want_grads=True)
    if not np.isfinite(values.l_total):
        raise NumericError(
            f"non-finite loss: rec={values.l_rec} cls={values.l_cls} "
            f"reg={values.l_reg}"
        )
    model.store.adam_step(cfg.learning_rate, cfg.beta1, cfg.beta2, cfg.eps)
    return values


def fit(model, split, graphs, cfg, eval_k=20):
    """Train until early stopping; returns (history, best_epoch).

    The model is left holding the best-validation-metric snapshot.
    """
    num_items = {"x": len(split.dataset.domain_x.items),
                 "y": len(split.dataset.domain_y.items)}
    pos_sets = {
        tag: positives_by_user(split.train[tag], model.num_users)
        for tag in ("x", "y")
    }
    seq = np.random.SeedSequence(cfg.seed).spawn(2)
    sample_rng = np.random.default_rng(seq[0])

    history = []
    best_metric = -np.inf
    best_snapshot = None
    best_epoch = -1
    stale = 0

    for epoch in range(cfg.max_epochs):
        started = time.perf_counter()
        progress = epoch / max(1, cfg.max_epochs - 1)
        grl_coef = grl_lambda(progress, model.config.grl_lambda_max)

        triples = {
            tag: _epoch_triples(
                split, tag, pos_sets[tag], num_items[tag],
                cfg.negatives_per_positive, sample_rng,
            )
            for tag in ("x", "y")
        }
        # both domains are stepped jointly; the smaller domain's epoch is
        # spread proportionally over the same steps so every triple is seen
        # exactly once per epoch in each domain
        longest = max(t[0].shape[0] for t in triples.values())
        num_steps = (longest + cfg.batch_size - 1) // cfg.batch_size
        slice_size = {
            tag: (triples[tag][0].shape[0] + num_steps - 1) // num_steps
            for tag in ("x", "y")
        }
        sums = np.zeros(4)
        for step in range(num_steps):
            batch = {}
            for tag in ("x", "y"):
                users, items, labels = triples[tag]
                lo = step * slice_size[tag]
                hi = min(lo + slice_size[tag], users.shape[0])
                if lo >= hi:  # tiny remainder: reuse the final slice
                    lo, hi = max(0, users.shape[0] - slice_size[tag]), users.shape[0]
                batch[tag] = (users[lo:hi], items[lo:hi], labels[lo:hi])
            values = training_step(model, graphs, batch, cfg, grl_coef)
            sums += (values.l_rec, values.l_cls, values.l_reg, values.l_total)
        sums /= num_steps

        report = evalkit.evaluate(model, graphs, split, "validation", k=eval_k)
        record = EpochRecord(
            epoch=epoch,
            l_rec=float(sums[0]), l_cls=float(sums[1]),
            l_reg=float(sums[2]), l_total=float(sums[3]),
            grl_lambda=float(grl_coef),
            recall_x=report.domains["x"].recall_at_k,
            ndcg_x=report.domains["x"].ndcg_at_k,
            recall_y=report.domains["y"].recall_at_k,
            ndcg_y=report.domains["y"].ndcg_at_k,
            seconds=time.perf_counter() - started,
        )
        history.append(record)
        log.info(
            "epoch %d: l_total=%.5f ndcg_x=%.4f ndcg_y=%.4f (%.2fs)",
            epoch, record.l_total, record.ndcg_x, record.ndcg_y, record.seconds,
        )

        if record.stop_metric > best_metric:
            best_metric = record.stop_metric
            best_snapshot = model.store.values_snapshot()
            best_epoch = epoch
            stale = 0
        else:
            stale += 1
            if stale >= cfg.patience:
                log.info("early stop at epoch %d (best epoch %d)", epoch, best_epoch)
                break

    model.store.load_values(best_snapshot)
    return history, best_epoch


# --- history I/O --------------------------------------------------------------

def write_history(history, path, digest=""):
    with open(path, "w", encoding="utf-8") as fh:
        if digest:
            fh.write(f"# config_digest={digest}\n")
        fh.write(",".join(HISTORY_COLUMNS) + "\n")
        for rec in history:
            fh.write(",".join(repr(getattr(rec, col)) for col in HISTORY_COLUMNS) + "\n")


def read_history(path):
    history = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            if line.startswith("#") or line.startswith("epoch"):
                continue
            parts = line.rstrip("\n").split(",")
            history.append(EpochRecord(
                epoch=int(parts[0]),
                **{col: float(v) for col, v in zip(HISTORY_COLUMNS[1:], parts[1:])},
            ))
    return history


# --- checkpoints ---------------------------------------------------------------

def save_checkpoint(model, run_config, path):
    """Binary snapshot: magic, length-prefixed config text, then parameter
    records (name length, name, rank, dims, row-major little-endian doubles)
    until end of file."""
    blob = run_config.to_text().encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        for param in model.store:
            name = param.name.encode("utf-8")
            fh.write(struct.pack("<I", len(name)))
            fh.write(name)
            arr = param.value
            fh.write(struct.pack("<I", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.astype("<f8", copy=False).tobytes(order="C"))


def _read_exact(fh, count, what):
    data = fh.read(count)
    if len(data) != count:
        raise TruncatedCheckpointError(f"checkpoint ends inside {what}")
    return data


def load_checkpoint(path):
    """Restore (run_config, model) from a checkpoint file."""
    try:
        fh = open(path, "rb")
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    with fh:
        magic = fh.read(len(CHECKPOINT_MAGIC))
        if magic != CHECKPOINT_MAGIC:
            raise MagicError(f"{path} is not a checkpoint (bad magic {magic!r})")
        (blob_len,) = struct.unpack("<I", _read_exact(fh, 4, "config length"))
        config_text = _read_exact(fh, blob_len, "config").decode("utf-8")
        run_config = parse_config_text(config_text)
        arrays = {}
        while True:
            head = fh.read(4)
            if not head:
                break  # clean end of file at a record boundary
            if len(head) != 4:
                raise TruncatedCheckpointError("checkpoint ends inside name length")
            (name_len,) = struct.unpack("<I", head)
            name = _read_exact(fh, name_len, "name").decode("utf-8")
            (rank,) = struct.unpack("<I", _read_exact(fh, 4, "rank"))
            shape = struct.unpack(f"<{rank}I", _read_exact(fh, 4 * rank, "dims"))
            count = int(np.prod(shape)) if rank else 1
            raw = _read_exact(fh, 8 * count, f"data of {name}")
            arrays[name] = np.frombuffer(raw, dtype="<f8").reshape(shape).copy()

    for required in ("user_x", "item_x", "user_y", "item_y"):
        if required not in arrays:
            raise CheckpointShapeError(f"checkpoint lacks parameter {required!r}")
    model_config = run_config.model_config()
    model = Model(
        model_config,
        num_users=arrays["user_x"].shape[0],
        num_items_x=arrays["item_x"].shape[0],
        num_items_y=arrays["item_y"].shape[0],
        seed=run_config.seed,
    )
    if set(model.store.names()) != set(arrays):
        raise CheckpointShapeError(
            f"parameter set mismatch: checkpoint has {sorted(arrays)}, "
            f"config implies {sorted(model.store.names())}"
        )
    for name, arr in arrays.items():
        if model.store[name].value.shape != arr.shape:
            raise CheckpointShapeError(
                f"parameter {name!r} has shape {arr.shape}, "
                f"config implies {model.store[name].value.shape}"
            )
        model.store[name].value[:] = arr
    return run_config, model
