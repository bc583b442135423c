"""The dual-domain network and its hand-derived gradients.

Per domain: user/item embedding tables are propagated through the bipartite
graph (hop 0..K concatenated), user rows are split column-wise into shared
and specific halves, the shared half is enhanced by an attention-gated
injection of the other domain's shared half, and scores are dots between
reassembled user rows and propagated item rows. A shared two-layer domain
classifier drives the disentanglement losses; its shared-branch input
gradients are negated (scaled by the reversal coefficient) on the way back.

Every forward operation here has an explicit backward; ``compute`` wires
them into the joint objective and accumulates analytic gradients.
"""

from dataclasses import dataclass

import numpy as np

from areil.errors import ConfigError, ShapeError
from areil.numcore import ParameterStore, spmm, uniform_init
from areil.numcore.kernels import scatter_add_rows

VARIANTS = ("full", "no_graph", "no_arem", "no_irlm")

EMBEDDING_NAMES = ("user_x", "item_x", "user_y", "item_y")
ATTENTION_NAMES = ("wq_x", "wk_x", "wq_y", "wk_y")
CLASSIFIER_NAMES = ("cls_w1", "cls_b1", "cls_w2", "cls_b2")


@dataclass
class ModelConfig:
    embed_dim: int = 64
    gcn_layers: int = 3
    gamma_s: float = 0.9
    gamma_t: float = 0.9
    lambda1: float = 0.01
    lambda2: float = 0.001
    grl_lambda_max: float = 1.0
    classifier_hidden: int = 0  # 0 -> half the shared width
    variant: str = "full"

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ConfigError(
                f"unknown variant {self.variant!r}; valid: {', '.join(VARIANTS)}"
            )
        if self.embed_dim < 2 or self.embed_dim % 2:
            raise ConfigError(f"embed_dim must be even and >= 2, got {self.embed_dim}")
        if self.gcn_layers < 0:
            raise ConfigError("gcn_layers must be >= 0")
        if self.variant == "no_arem":
            self.gamma_s = self.gamma_t = 1.0
        if self.variant == "no_irlm":
            self.lambda1 = 0.0
        for name, g in (("gamma_s", self.gamma_s), ("gamma_t", self.gamma_t)):
            if not 0.0 < g <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1], got {g}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ConfigError("lambda1 and lambda2 must be non-negative")

    @property
    def effective_layers(self):
        return 0 if self.variant == "no_graph" else self.gcn_layers

    @property
    def combined_dim(self):
        """Width of a propagated-and-concatenated node row."""
        return (self.effective_layers + 1) * self.embed_dim

    @property
    def shared_dim(self):
        """Width of the shared (or specific) half of a user row."""
        return self.combined_dim // 2

    @property
    def hidden_dim(self):
        return self.classifier_hidden or max(1, self.shared_dim // 2)

    @property
    def enhancement_active(self):
        return self.variant != "no_arem"

    @property
    def classifier_active(self):
        return self.lambda1 > 0.0


@dataclass
class LossValues:
    l_rec: float
    l_cls: float
    l_reg: float
    l_total: float


def stable_sigmoid(x):
    x = np.asarray(x)
    if x.dtype.kind != "f":
        x = x.astype(np.float64)
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def binary_cross_entropy(probs, labels):
    """Mean BCE with probabilities clamped to [1e-12, 1 - 1e-12]."""
    clamped = np.clip(probs, 1e-12, 1.0 - 1e-12)
    return -np.mean(labels * np.log(clamped) + (1.0 - labels) * np.log(1.0 - clamped))


def softmax(v):
    shifted = v - v.max()
    e = np.exp(shifted)
    return e / e.sum()


# --- graph propagation -------------------------------------------------------

def propagate_and_concat(graph, user_emb, item_emb, num_layers):
    """Hop-0..K node features, concatenated along the feature axis.

    Layer 0 is the raw embedding; each next layer is one normalized-adjacency
    propagation. Returns (user_out, item_out) of width (K+1) * embed_dim.
    """
    if user_emb.shape[0] != graph.num_users or item_emb.shape[0] != graph.num_items:
        raise ShapeError(
            f"embedding rows {user_emb.shape[0]}/{item_emb.shape[0]} do not match "
            f"graph with {graph.num_users} users / {graph.num_items} items"
        )
    nodes = np.vstack([user_emb, item_emb])
    layers = [nodes]
    for _ in range(num_layers):
        layers.append(spmm(graph, layers[-1]))
    stacked = np.hstack(layers) if num_layers else layers[0]
    return stacked[: graph.num_users], stacked[graph.num_users:]


def propagate_backward(graph, d_user_out, d_item_out, num_layers, embed_dim):
    """Gradient of propagate_and_concat w.r.t. the layer-0 node features.

    The adjacency is symmetric, so the transposed propagation reuses spmm.
    """
    grad = None
    for k in range(num_layers, -1, -1):
        block = np.vstack([
            d_user_out[:, k * embed_dim:(k + 1) * embed_dim],
            d_item_out[:, k * embed_dim:(k + 1) * embed_dim],
        ])
        grad = block if grad is None else block + spmm(graph, grad)
    return grad


# --- shared/specific split ---------------------------------------------------

def shared_specific_columns(embed_dim, num_blocks):
    """Column indices of the shared and specific halves, per layer block."""
    cols = np.arange(num_blocks * embed_dim).reshape(num_blocks, embed_dim)
    half = embed_dim // 2
    return cols[:, :half].ravel(), cols[:, half:].ravel()


def split_user_embedding(user_out, embed_dim):
    """Per layer block, first half of the columns is shared, last is specific."""
    if user_out.shape[1] % embed_dim or embed_dim % 2:
        raise ConfigError(
            f"cannot split width {user_out.shape[1]} into even blocks of {embed_dim}"
        )
    sha, spe = shared_specific_columns(embed_dim, user_out.shape[1] // embed_dim)
    return user_out[:, sha], user_out[:, spe]


def merge_user_embedding(shared, specific, embed_dim):
    """Inverse of split_user_embedding (block-interleaved reassembly)."""
    width = shared.shape[1] + specific.shape[1]
    sha, spe = shared_specific_columns(embed_dim, width // embed_dim)
    out = np.empty((shared.shape[0], width), dtype=shared.dtype)
    out[:, sha] = shared
    out[:, spe] = specific
    return out


# --- inter-domain enhancement ------------------------------------------------

def inter_domain_enhance(shared_self, shared_other, w_query, w_key, gamma):
    """Attention-gated injection of the other domain's shared embedding.

    The two shared halves are concatenated per user; query/key projections
    give an attention matrix whose query-axis column sums form a feature
    distribution. Its other-domain slice, softmax-normalized and scaled to
    mean one, gates the other domain's shared embedding, and the result is
    blended with weight gamma.
    """
    if not 0.0 < gamma <= 1.0:
        raise ConfigError(f"fusion weight must lie in (0, 1], got {gamma}")
    if shared_self.shape != shared_other.shape:
        raise ShapeError(
            f"shared embeddings disagree: {shared_self.shape} vs {shared_other.shape}"
        )
    width = shared_self.shape[1]
    if w_query.shape != (2 * width, 2 * width) or w_key.shape != (2 * width, 2 * width):
        raise ShapeError(
            f"attention weights must be {(2 * width, 2 * width)}, "
            f"got {w_query.shape} and {w_key.shape}"
        )
    combined = np.hstack([shared_self, shared_other])
    q = combined @ w_query
    k = combined @ w_key
    row_q = q.sum(axis=1)
    p = k.T @ row_q  # column sums of q.T @ k, length 2 * width
    # scale the distribution before the softmax: raw column sums grow with
    # the user count and the squared embedding scale, which would saturate
    # the softmax into a one-feature selector. The rms * sqrt(len) scale
    # bounds the softmax argument to [-1, 1], keeping the gate a gentle,
    # non-saturating emphasis that training can still flatten.
    p_slice = p[width:]
    norm = np.sqrt(np.sum(p_slice**2))
    z = p_slice / norm if norm > 1e-30 else np.zeros_like(p_slice)
    sm = softmax(z)
    gate = sm * width
    commonality = shared_other * gate
    enhanced = gamma * shared_self + (1.0 - gamma) * commonality
    cache = (combined, k, row_q, z, norm, sm, shared_other, gamma, width)
    return enhanced, cache


def enhance_backward(d_enhanced, cache, w_query, w_key):
    combined, k, row_q, z, norm, sm, shared_other, gamma, width = cache
    gate = sm * width
    d_self = gamma * d_enhanced
    d_common = (1.0 - gamma) * d_enhanced
    d_other = d_common * gate
    d_gate = (d_common * shared_other).sum(axis=0)
    inner = width * d_gate
    d_z = sm * (inner - (inner * sm).sum())
    if norm > 1e-30:
        d_slice = (d_z - z * np.sum(d_z * z)) / norm
    else:
        d_slice = np.zeros_like(d_z)
    d_p = np.zeros(2 * width)
    d_p[width:] = d_slice
    # d_k = outer(row_q, d_p) and d_q has identical columns d_row_q, so the
    # weight and input gradients collapse to rank-one products
    d_row_q = k @ d_p
    ct_drq = combined.T @ d_row_q
    ct_rq = combined.T @ row_q
    d_wq = np.repeat(ct_drq[:, None], 2 * width, axis=1)
    d_wk = np.outer(ct_rq, d_p)
    d_combined = np.outer(d_row_q, w_query.sum(axis=1)) \
        + np.outer(row_q, w_key @ d_p)
    d_self += d_combined[:, :width]
    d_other += d_combined[:, width:]
    return d_self, d_other, d_wq, d_wk


def attention_matrix(shared_self, shared_other, w_query, w_key):
    """Explicit query-key attention matrix (inspection and test oracle)."""
    combined = np.hstack([shared_self, shared_other])
    return (combined @ w_query).T @ (combined @ w_key)


# --- gradient reversal and domain classification -----------------------------

def apply_grl(x, reversal):
    """Identity in the forward pass; the backward contract (upstream gradient
    scaled by -reversal) is applied where the classifier loss backpropagates."""
    if reversal < 0:
        raise ConfigError("reversal coefficient must be >= 0")
    return x


def domain_classify(weights, x):
    """Two affine layers with a rectifier between; one logit per row."""
    w1, b1, w2, b2 = weights
    if x.shape[1] != w1.shape[0]:
        raise ShapeError(f"classifier input width {x.shape[1]} != {w1.shape[0]}")
    pre = x @ w1 + b1
    act = np.maximum(pre, 0.0)
    logits = act @ w2 + b2
    return logits, (x, pre, act)


def classifier_backward(weights, cache, d_logits):
    w1, _, w2, _ = weights
    x, pre, act = cache
    d_w2 = act.T @ d_logits
    d_b2 = d_logits.sum(axis=0)
    d_act = d_logits @ w2.T
    d_pre = np.where(pre > 0, d_act, 0.0)
    d_w1 = x.T @ d_pre
    d_b1 = d_pre.sum(axis=0)
    d_x = d_pre @ w1.T
    return d_x, (d_w1, d_b1, d_w2, d_b2)


def classification_loss(weights, shared_x, shared_y, specific_x, specific_y,
                        grl_lambda, reverse=True, want_grads=True):
    """Four-branch disentanglement loss with shared classifier weights.

    Specific embeddings should be classifiable by domain (labels 0 for x,
    1 for y); shared embeddings pass through the gradient reversal, so their
    input gradients come back scaled by -grl_lambda. ``reverse=False``
    disables the reversal (instrumentation for the backward contract).

    Returns (loss, input_grads, weight_grads); gradients are unscaled by
    any outer loss weight (None when want_grads is off).
    """
    branches = (
        ("specific_x", specific_x, 0.0, False),
        ("specific_y", specific_y, 1.0, False),
        ("shared_x", shared_x, 0.0, True),
        ("shared_y", shared_y, 1.0, True),
    )
    total = 0.0
    input_grads = {}
    weight_grads = [np.zeros_like(w) for w in weights] if want_grads else None
    for name, mat, label, through_grl in branches:
        feat = apply_grl(mat, grl_lambda) if through_grl else mat
        logits, cache = domain_classify(weights, feat)
        probs = stable_sigmoid(logits[:, 0])
        labels = np.full(mat.shape[0], label)
        total += binary_cross_entropy(probs, labels)
        if not want_grads:
            continue
        d_logits = ((probs - labels) / mat.shape[0])[:, None]
        d_input, grads = classifier_backward(weights, cache, d_logits)
        if through_grl and reverse:
            d_input = -grl_lambda * d_input
        input_grads[name] = d_input
        for acc, g in zip(weight_grads, grads):
            acc += g
    return total, input_grads, weight_grads


# --- prediction --------------------------------------------------------------

def predict_scores(user_rows, item_rows):
    """Row-wise dot products (raw, pre-logistic)."""
    if user_rows.shape != item_rows.shape:
        raise ShapeError(
            f"score operands disagree: {user_rows.shape} vs {item_rows.shape}"
        )
    return np.einsum("ij,ij->i", user_rows, item_rows)


# --- the assembled model -----------------------------------------------------

class Model:
    """Parameter tables plus the joint forward/backward over both domains."""

    def __init__(self, config, num_users, num_items_x, num_items_y, seed=0):
        self.config = config
        self.num_users = num_users
        self.num_items = {"x": num_items_x, "y": num_items_y}
        self.store = ParameterStore()
        rng = np.random.default_rng(seed)
        d = config.embed_dim
        # both user tables start from one draw: the shared halves begin
        # aligned across domains instead of having to discover a common
        # rotation through the adversarial signal alone
        user_init = uniform_init(rng, num_users, d)
        self.store.add("user_x", user_init)
        self.store.add("item_x", uniform_init(rng, num_items_x, d))
        self.store.add("user_y", user_init.copy())
        self.store.add("item_y", uniform_init(rng, num_items_y, d))
        full = config.combined_dim
        for name in ATTENTION_NAMES:
            self.store.add(name, uniform_init(rng, full, full))
        dp, hidden = config.shared_dim, config.hidden_dim
        self.store.add("cls_w1", uniform_init(rng, dp, hidden))
        self.store.add("cls_b1", np.zeros(hidden))
        self.store.add("cls_w2", uniform_init(rng, hidden, 1))
        self.store.add("cls_b2", np.zeros(1))

    def classifier_weights(self):
        return tuple(self.store[name].value for name in CLASSIFIER_NAMES)

    def active_parameter_names(self):
        """Parameters participating in the current variant's objective."""
        names = list(EMBEDDING_NAMES)
        if self.config.enhancement_active:
            names += ATTENTION_NAMES
        if self.config.classifier_active:
            names += CLASSIFIER_NAMES
        return names

    def forward_factors(self, graphs, dtype=None):
        """Per-domain propagated factors, shared/specific split, enhancement.

        ``dtype`` casts parameter reads (extended-precision loss evaluation
        for finite-difference verification); None keeps native float64.
        """
        cfg = self.config
        d, layers = cfg.embed_dim, cfg.effective_layers

        def value(name):
            arr = self.store[name].value
            return arr if dtype is None else arr.astype(dtype)

        per = {}
        for tag in ("x", "y"):
            user_out, item_out = propagate_and_concat(
                graphs[tag],
                value(f"user_{tag}"),
                value(f"item_{tag}"),
                layers,
            )
            shared, specific = split_user_embedding(user_out, d)
            per[tag] = {
                "item_out": item_out,
                "shared": shared,
                "specific": specific,
            }
        for tag, other, gamma in (("x", "y", cfg.gamma_s), ("y", "x", cfg.gamma_t)):
            if cfg.enhancement_active:
                enhanced, cache = inter_domain_enhance(
                    per[tag]["shared"], per[other]["shared"],
                    value(f"wq_{tag}"), value(f"wk_{tag}"),
                    gamma,
                )
                per[tag]["enhanced"] = enhanced
                per[tag]["enhance_cache"] = cache
            else:
                per[tag]["enhanced"] = per[tag]["shared"]
                per[tag]["enhance_cache"] = None
        for tag in ("x", "y"):
            per[tag]["user_final"] = merge_user_embedding(
                per[tag]["enhanced"], per[tag]["specific"], d
            )
        return per

    def user_item_factors(self, graphs):
        """Final user rows and propagated item rows per domain (for scoring)."""
        per = self.forward_factors(graphs)
        return {tag: (per[tag]["user_final"], per[tag]["item_out"]) for tag in per}

    def grl_surrogate_anchor(self, graphs, grl_lambda):
        """Anchor for finite-difference checks of the reversal gradient field.

        The reversal layer's training gradients are not the derivative of the
        forward loss; they are the exact derivative of the surrogate objective
        in which the shared classifier inputs are replaced by
        (1 + lambda) * x0 - lambda * x, with x0 detached at the current
        parameters. This returns the (1 + lambda) * x0 term per domain.
        """
        per = self.forward_factors(graphs)
        return {tag: (1.0 + grl_lambda) * per[tag]["enhanced"] for tag in ("x", "y")}

    def compute(self, graphs, batches, grl_lambda, want_grads=True,
                grl_surrogate=None, dtype=None):
        """Joint objective over both domains; accumulates analytic gradients.

        ``batches`` maps domain tag to (users, items, labels) arrays. The
        classification branches run over every user row. Gradients land in
        the store's grad buffers (added to whatever is there).

        ``grl_surrogate`` (from grl_surrogate_anchor) substitutes the
        detached-anchor shared inputs; loss-only evaluations with it are what
        central differences can legitimately compare against. ``dtype``
        selects an extended-precision loss evaluation (loss-only).
        """
        if want_grads and (grl_surrogate is not None or dtype is not None):
            raise ValueError(
                "surrogate/extended-precision paths are for loss-only evaluation"
            )
        cfg = self.config
        per = self.forward_factors(graphs, dtype=dtype)

        l_rec = 0.0
        rec_grads = {}
        for tag in ("x", "y"):
            users, items, labels = batches[tag]
            user_rows = per[tag]["user_final"][users]
            item_rows = per[tag]["item_out"][items]
            scores = predict_scores(user_rows, item_rows)
            probs = stable_sigmoid(scores)
            l_rec = l_rec + binary_cross_entropy(probs, labels)
            if want_grads:
                d_scores = (probs - labels) / labels.shape[0]
                rec_grads[tag] = (d_scores, user_rows, item_rows)

        l_cls = 0.0
        cls_result = None
        if cfg.classifier_active:
            weights = self.classifier_weights()
            if dtype is not None:
                weights = tuple(w.astype(dtype) for w in weights)
            shared_in = {tag: per[tag]["enhanced"] for tag in ("x", "y")}
            if grl_surrogate is not None:
                shared_in = {
                    tag: grl_surrogate[tag] - grl_lambda * per[tag]["enhanced"]
                    for tag in ("x", "y")
                }
            l_cls, input_grads, weight_grads = classification_loss(
                weights,
                shared_in["x"], shared_in["y"],
                per["x"]["specific"], per["y"]["specific"],
                grl_lambda, want_grads=want_grads,
            )
            cls_result = (input_grads, weight_grads) if want_grads else None

        active = self.active_parameter_names()
        if dtype is None:
            l_reg = sum(np.sum(self.store[n].value ** 2) for n in active)
        else:
            l_reg = sum(
                np.sum(self.store[n].value.astype(dtype) ** 2) for n in active
            )
        l_total = l_rec + cfg.lambda1 * l_cls + cfg.lambda2 * l_reg
        if dtype is None:
            values = LossValues(
                float(l_rec), float(l_cls), float(l_reg), float(l_total)
            )
        else:
            values = LossValues(l_rec, l_cls, l_reg, l_total)
        if not want_grads:
            return values

        self._backward(graphs, batches, per, rec_grads, cls_result, active)
        return values

    def _backward(self, graphs, batches, per, rec_grads, cls_result, active):
        cfg = self.config
        d = cfg.embed_dim
        d_shared = {t: np.zeros_like(per[t]["shared"]) for t in ("x", "y")}
        d_specific = {t: np.zeros_like(per[t]["specific"]) for t in ("x", "y")}
        d_enhanced = {t: np.zeros_like(per[t]["enhanced"]) for t in ("x", "y")}
        d_item_out = {t: np.zeros_like(per[t]["item_out"]) for t in ("x", "y")}

        for tag in ("x", "y"):
            users, items, labels = batches[tag]
            d_scores, user_rows, item_rows = rec_grads[tag]
            d_user_final = np.zeros_like(per[tag]["user_final"])
            scatter_add_rows(d_user_final, np.asarray(users, dtype=np.int64),
                             d_scores, item_rows)
            scatter_add_rows(d_item_out[tag], np.asarray(items, dtype=np.int64),
                             d_scores, user_rows)
            d_enh, d_spe = split_user_embedding(d_user_final, d)
            d_enhanced[tag] += d_enh
            d_specific[tag] += d_spe

        if cls_result is not None:
            input_grads, weight_grads = cls_result
            lam1 = cfg.lambda1
            d_enhanced["x"] += lam1 * input_grads["shared_x"]
            d_enhanced["y"] += lam1 * input_grads["shared_y"]
            d_specific["x"] += lam1 * input_grads["specific_x"]
            d_specific["y"] += lam1 * input_grads["specific_y"]
            for name, grad in zip(CLASSIFIER_NAMES, weight_grads):
                self.store[name].grad += lam1 * grad

        if cfg.enhancement_active:
            for tag, other in (("x", "y"), ("y", "x")):
                d_self, d_other, d_wq, d_wk = enhance_backward(
                    d_enhanced[tag], per[tag]["enhance_cache"],
                    self.store[f"wq_{tag}"].value, self.store[f"wk_{tag}"].value,
                )
                d_shared[tag] += d_self
                d_shared[other] += d_other
                self.store[f"wq_{tag}"].grad += d_wq
                self.store[f"wk_{tag}"].grad += d_wk
        else:
            for tag in ("x", "y"):
                d_shared[tag] += d_enhanced[tag]

        for tag in ("x", "y"):
            d_user_out = merge_user_embedding(d_shared[tag], d_specific[tag], d)
            d_nodes = propagate_backward(
                graphs[tag], d_user_out, d_item_out[tag], cfg.effective_layers, d
            )
            self.store[f"user_{tag}"].grad += d_nodes[: self.num_users]
            self.store[f"item_{tag}"].grad += d_nodes[self.num_users:]

        for name in active:
            param = self.store[name]
            param.grad += (2.0 * cfg.lambda2) * param.value
