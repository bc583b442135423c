"""Full-ranking evaluation over the whole item catalog, ablation runs,
disentanglement probing, and embedding export.

Metrics are means over users with at least one relevant item in the
evaluated split; known positives from other splits are masked out of the
candidate set. Ties break by ascending item index, so evaluation is fully
deterministic and parallel-safe.
"""

import logging
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from areil.errors import ConfigError, CorpusError
from areil.model import (
    Model,
    classifier_backward,
    domain_classify,
    stable_sigmoid,
)
from areil.numcore import ParameterStore, uniform_init

log = logging.getLogger("areil.evalkit")


@dataclass
class DomainMetrics:
    recall_at_k: float
    ndcg_at_k: float
    evaluated_users: int
    skipped_users: int


@dataclass
class EvalReport:
    split: str
    k: int
    masked_items_policy: str
    domains: dict
    seed: int = 0
    variant: str = "full"
    config_digest: str = ""
    extra: dict = field(default_factory=dict)

    def to_text(self):
        lines = [
            f"split: {self.split}",
            f"k: {self.k}",
            f"masked_items_policy: {self.masked_items_policy}",
            f"seed: {self.seed}",
            f"variant: {self.variant}",
            f"config_digest: {self.config_digest}",
        ]
        for tag, m in self.domains.items():
            lines += [
                f"recall_at_{self.k}_{tag}: {m.recall_at_k:.6f}",
                f"recall_at_{self.k}_{tag}_pct: {100 * m.recall_at_k:.4f}",
                f"ndcg_at_{self.k}_{tag}: {m.ndcg_at_k:.6f}",
                f"ndcg_at_{self.k}_{tag}_pct: {100 * m.ndcg_at_k:.4f}",
                f"evaluated_users_{tag}: {m.evaluated_users}",
                f"skipped_users_{tag}: {m.skipped_users}",
            ]
        return "\n".join(lines) + "\n"

    @staticmethod
    def summary_header():
        return ("variant,seed,split,k,recall_x,ndcg_x,recall_y,ndcg_y,"
                "users_x,users_y,config_digest")

    def summary_row(self):
        mx, my = self.domains["x"], self.domains["y"]
        return (
            f"{self.variant},{self.seed},{self.split},{self.k},"
            f"{mx.recall_at_k:.6f},{mx.ndcg_at_k:.6f},"
            f"{my.recall_at_k:.6f},{my.ndcg_at_k:.6f},"
            f"{mx.evaluated_users},{my.evaluated_users},{self.config_digest}"
        )


# --- ranking and metrics -------------------------------------------------------

def rank_all(scores_row):
    """Descending-score permutation, ties broken by ascending item index;
    non-finite (masked) entries are excluded."""
    order = np.argsort(-scores_row, kind="stable")
    return order[np.isfinite(scores_row[order])]


def top_k(scores_row, k):
    """First k of rank_all, via a partition shortcut for large catalogs."""
    n = scores_row.shape[0]
    if k >= n:
        return rank_all(scores_row)
    bound = np.argpartition(-scores_row, k - 1)[:k]
    kth = scores_row[bound].min()
    cand = np.flatnonzero(scores_row >= kth)
    order = cand[np.argsort(-scores_row[cand], kind="stable")]
    return order[np.isfinite(scores_row[order])][:k]


def rank_items(model, graphs, user, tag, mask=(), _factors=None):
    """Full deterministic ranking of one user's unmasked items."""
    factors = _factors if _factors is not None else model.user_item_factors(graphs)
    if tag not in factors:
        raise CorpusError(f"unknown domain {tag!r}")
    user_fin, item_out = factors[tag]
    if not 0 <= user < user_fin.shape[0]:
        raise CorpusError(f"unknown user index {user}")
    scores = item_out @ user_fin[user]
    if len(mask):
        scores = scores.copy()
        scores[np.fromiter(mask, dtype=np.int64)] = -np.inf
    return rank_all(scores)


def recall_at_k(ranked, relevant, k):
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    hits = len(set(ranked[:k]) & set(relevant))
    return hits / len(relevant)


def ndcg_at_k(ranked, relevant, k):
    if not relevant:
        raise ValueError("relevant set must be non-empty")
    relevant = set(relevant)
    dcg = 0.0
    for pos, item in enumerate(ranked[:k], start=1):
        if item in relevant:
            dcg += 1.0 / np.log2(pos + 1)
    ideal = sum(1.0 / np.log2(p + 1) for p in range(1, min(k, len(relevant)) + 1))
    return dcg / ideal


def _pairs_by_user(pairs, num_users):
    by_user = [[] for _ in range(num_users)]
    for u, i in pairs:
        by_user[u].append(i)
    return by_user


def evaluate(model, graphs, split, part="validation", k=20, threads=1, **metadata):
    """Per-domain Recall@K and NDCG@K over the whole catalog.

    Evaluating the test split masks training and validation items; the
    validation split masks training items only.
    """
    if part not in ("validation", "test"):
        raise ConfigError(f"split must be validation or test, got {part!r}")
    relevant_part = split.part(part)
    if not any(relevant_part[tag] for tag in ("x", "y")):
        raise CorpusError(f"{part} split is empty")
    policy = "train" if part == "validation" else "train+validation"

    factors = model.user_item_factors(graphs)
    num_users = model.num_users
    discounts = 1.0 / np.log2(np.arange(2, k + 2))
    domains = {}
    for tag in ("x", "y"):
        user_fin, item_out = factors[tag]
        num_items = item_out.shape[0]
        relevant = _pairs_by_user(relevant_part[tag], num_users)
        masks = _pairs_by_user(split.train[tag], num_users)
        if part == "test":
            for u, i in split.validation[tag]:
                masks[u].append(i)

        recalls = np.full(num_users, np.nan)
        ndcgs = np.full(num_users, np.nan)

        def eval_user(u, row, _relevant=relevant, _masks=masks,
                      _recalls=recalls, _ndcgs=ndcgs):
            rel = _relevant[u]
            if not rel:
                return
            if _masks[u]:
                row = row.copy()
                row[_masks[u]] = -np.inf
            ranked = top_k(row, k)
            rel_set = set(rel)
            hit_positions = [p for p, item in enumerate(ranked) if item in rel_set]
            _recalls[u] = len(hit_positions) / len(rel)
            ideal = discounts[: min(k, len(rel))].sum()
            _ndcgs[u] = discounts[hit_positions].sum() / ideal

        # score users in chunks to bound the dense score matrix footprint
        chunk = max(1, min(num_users, 64_000_000 // max(1, num_items)))
        for lo in range(0, num_users, chunk):
            hi = min(lo + chunk, num_users)
            scores = user_fin[lo:hi] @ item_out.T
            if threads > 1:
                with ThreadPoolExecutor(max_workers=threads) as pool:
                    list(pool.map(
                        lambda u: eval_user(u, scores[u - lo]), range(lo, hi)
                    ))
            else:
                for u in range(lo, hi):
                    eval_user(u, scores[u - lo])

        evaluated = np.flatnonzero(~np.isnan(recalls))
        skipped = num_users - evaluated.shape[0]
        domains[tag] = DomainMetrics(
            recall_at_k=float(recalls[evaluated].mean()) if evaluated.size else 0.0,
            ndcg_at_k=float(ndcgs[evaluated].mean()) if evaluated.size else 0.0,
            evaluated_users=int(evaluated.shape[0]),
            skipped_users=int(skipped),
        )
    return EvalReport(
        split=part, k=k, masked_items_policy=policy, domains=domains, **metadata
    )


# --- ablation runner -----------------------------------------------------------

def run_ablation(split, graphs, base_config, variants, part="test", k=20):
    """Train and evaluate each variant with identical seed and data."""
    from areil import trainer  # local import; trainer depends on this module

    reports = []
    for variant in variants:
        run_cfg = base_config.replace(variant=variant)
        model_cfg = run_cfg.model_config()
        model = Model(
            model_cfg,
            num_users=len(split.dataset.shared_users),
            num_items_x=len(split.dataset.domain_x.items),
            num_items_y=len(split.dataset.domain_y.items),
            seed=run_cfg.seed,
        )
        history, _ = trainer.fit(model, split, graphs, run_cfg, eval_k=k)
        report = evaluate(
            model, graphs, split, part, k=k,
            seed=run_cfg.seed, variant=variant, config_digest=run_cfg.digest(),
        )
        report.extra["history"] = history
        reports.append(report)
    return reports


def ablation_table(reports):
    lines = [EvalReport.summary_header()]
    lines += [r.summary_row() for r in reports]
    return "\n".join(lines) + "\n"


# --- disentanglement probe -------------------------------------------------------

def _train_probe(features, labels, train_rows, test_rows, hidden, seed, steps, lr):
    """Fit a fresh two-layer classifier on frozen rows; held-out accuracy."""
    rng = np.random.default_rng(seed)
    store = ParameterStore()
    store.add("w1", uniform_init(rng, features.shape[1], hidden))
    store.add("b1", np.zeros(hidden))
    store.add("w2", uniform_init(rng, hidden, 1))
    store.add("b2", np.zeros(1))
    x_train, y_train = features[train_rows], labels[train_rows]
    for _ in range(steps):
        weights = tuple(store[n].value for n in ("w1", "b1", "w2", "b2"))
        logits, cache = domain_classify(weights, x_train)
        probs = stable_sigmoid(logits[:, 0])
        d_logits = ((probs - y_train) / y_train.shape[0])[:, None]
        _, grads = classifier_backward(weights, cache, d_logits)
        for name, grad in zip(("w1", "b1", "w2", "b2"), grads):
            store[name].grad += grad
        store.adam_step(lr)
    weights = tuple(store[n].value for n in ("w1", "b1", "w2", "b2"))
    logits, _ = domain_classify(weights, features[test_rows])
    preds = stable_sigmoid(logits[:, 0]) > 0.5
    return float(np.mean(preds == (labels[test_rows] > 0.5)))


def disentanglement_probe(model, graphs, seed=0, steps=300, lr=0.01):
    """Held-out domain-classification accuracy of fresh probes trained on
    the frozen disentangled user embeddings (80/20 user split).

    The probes see the embedding-layer representations: the specific probe
    gets each domain's raw specific half, the shared probe gets the
    embedding-layer block of the enhanced shared representation (the object
    the reversal layer constrains). A well-disentangled model yields
    separable specific halves and near-chance shared halves.

    Returns (acc_specific, acc_shared).
    """
    num_users = model.num_users
    half = model.config.embed_dim // 2
    rng = np.random.default_rng(seed)
    perm = rng.permutation(num_users)
    cut = max(1, int(0.8 * num_users))
    train_users, test_users = perm[:cut], perm[cut:]
    # rows 0..U-1 come from domain x, U..2U-1 from domain y
    train_rows = np.concatenate([train_users, train_users + num_users])
    test_rows = np.concatenate([test_users, test_users + num_users])
    labels = np.concatenate([np.zeros(num_users), np.ones(num_users)])
    hidden = max(1, half // 2)

    per = model.forward_factors(graphs)
    views = {
        "specific": {
            tag: model.store[f"user_{tag}"].value[:, half:] for tag in ("x", "y")
        },
        "shared": {tag: per[tag]["enhanced"][:, :half] for tag in ("x", "y")},
    }
    accuracies = {}
    for component, view in views.items():
        features = np.vstack([view["x"], view["y"]])
        accuracies[component] = _train_probe(
            features, labels, train_rows, test_rows, hidden,
            seed=seed + 1, steps=steps, lr=lr,
        )
    return accuracies["specific"], accuracies["shared"]


# --- embedding export ------------------------------------------------------------

def export_embeddings(model, graphs, dataset, out_dir):
    """Write per-user disentangled embeddings and per-item embeddings as TSV."""
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    per = model.forward_factors(graphs)
    user_tokens = dataset.shared_users.index_to_token

    user_path = out / "user_embeddings.tsv"
    with open(user_path, "w", encoding="utf-8") as fh:
        width = per["x"]["enhanced"].shape[1]
        header = ["user_token", "domain", "component"]
        header += [f"v{j}" for j in range(width)]
        fh.write("\t".join(header) + "\n")
        for tag in ("x", "y"):
            for component, key in (("shared", "enhanced"), ("specific", "specific")):
                mat = per[tag][key]
                for u, token in enumerate(user_tokens):
                    values = "\t".join(repr(float(v)) for v in mat[u])
                    fh.write(f"{token}\t{tag}\t{component}\t{values}\n")

    item_path = out / "item_embeddings.tsv"
    with open(item_path, "w", encoding="utf-8") as fh:
        width = per["x"]["item_out"].shape[1]
        header = ["item_token", "domain"] + [f"v{j}" for j in range(width)]
        fh.write("\t".join(header) + "\n")
        for tag in ("x", "y"):
            tokens = dataset.domain(tag).items.index_to_token
            mat = per[tag]["item_out"]
            for i, token in enumerate(tokens):
                values = "\t".join(repr(float(v)) for v in mat[i])
                fh.write(f"{token}\t{tag}\t{values}\n")
    return user_path, item_path
