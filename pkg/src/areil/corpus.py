"""Raw rating logs to aligned, split, graph-ready interaction data.

Pipeline: ingest per-domain logs (binarizing by a rating threshold), keep
only users present in both domains, split 80/10/10 per domain, and build
symmetric-normalized bipartite adjacencies over the training interactions.
All steps are pure and deterministic under a fixed seed.
"""

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from areil.errors import (
    AlignmentError,
    CorpusError,
    EmptyDatasetError,
    GraphConstructionError,
    ParseError,
)

log = logging.getLogger("areil.corpus")

DOMAIN_TAGS = ("x", "y")


class IdMap:
    """Bijection between opaque tokens and dense indices, in sorted-token order."""

    def __init__(self, tokens):
        self.index_to_token = sorted(set(tokens))
        self.token_to_index = {t: i for i, t in enumerate(self.index_to_token)}

    def __len__(self):
        return len(self.index_to_token)

    def __getitem__(self, token):
        return self.token_to_index[token]

    def __eq__(self, other):
        return isinstance(other, IdMap) and self.index_to_token == other.index_to_token


@dataclass
class DomainDataset:
    users: IdMap
    items: IdMap
    interactions: list  # (user_index, item_index) pairs, deduplicated
    raw_records: int = 0

    @property
    def num_interactions(self):
        return len(self.interactions)

    def density(self):
        denom = len(self.users) * len(self.items)
        return self.num_interactions / denom if denom else 0.0


@dataclass
class CrossDomainDataset:
    shared_users: IdMap
    domain_x: DomainDataset
    domain_y: DomainDataset

    def domain(self, tag):
        return self.domain_x if tag == "x" else self.domain_y


@dataclass
class SplitDataset:
    """Per-domain train/validation/test partition of a CrossDomainDataset."""

    dataset: CrossDomainDataset
    seed: int
    train: dict = field(default_factory=dict)       # tag -> list of pairs
    validation: dict = field(default_factory=dict)
    test: dict = field(default_factory=dict)
    reassigned: dict = field(default_factory=dict)  # tag -> promoted pair count

    def part(self, name):
        return {"train": self.train, "validation": self.validation, "test": self.test}[name]


@dataclass
class DomainGraph:
    """Bipartite user-item graph in CSR form with 1/sqrt(deg*deg) edge weights.

    Nodes 0..num_users-1 are users, num_users..num_users+num_items-1 items.
    """

    num_users: int
    num_items: int
    indptr: np.ndarray
    indices: np.ndarray
    data: np.ndarray

    @property
    def num_nodes(self):
        return self.num_users + self.num_items

    @property
    def num_edges(self):
        return int(self.indices.shape[0])


def _parse_line(line, delimiter, lineno, path):
    parts = [p.strip() for p in line.split(delimiter)]
    if len(parts) not in (3, 4):
        raise ParseError(
            f"{path}:{lineno}: expected 3 or 4 fields, got {len(parts)}"
        )
    user_token, item_token = parts[0], parts[1]
    if not user_token or not item_token:
        raise ParseError(f"{path}:{lineno}: empty user or item token")
    try:
        rating = float(parts[2])
    except ValueError:
        raise ParseError(f"{path}:{lineno}: bad rating {parts[2]!r}") from None
    if len(parts) == 4 and parts[3]:
        try:
            int(float(parts[3]))  # timestamps parsed for validation, unused
        except ValueError:
            raise ParseError(f"{path}:{lineno}: bad timestamp {parts[3]!r}") from None
    return user_token, item_token, rating


def ingest_interactions(path, positive_threshold=0.0, delimiter=","):
    """Read one domain's rating log and binarize it into a DomainDataset.

    Records with rating >= positive_threshold become positive interactions;
    duplicate (user, item) pairs collapse to one. Lines starting with '#'
    and blank lines are skipped.
    """
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise CorpusError(f"cannot read interaction file {path}: {exc}") from exc

    pairs = set()
    raw_records = 0
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        user_token, item_token, rating = _parse_line(stripped, delimiter, lineno, path)
        raw_records += 1
        if rating >= positive_threshold:
            pairs.add((user_token, item_token))

    if not pairs:
        raise EmptyDatasetError(
            f"no positive interactions in {path} at threshold {positive_threshold}"
        )

    users = IdMap(u for u, _ in pairs)
    items = IdMap(i for _, i in pairs)
    interactions = sorted((users[u], items[i]) for u, i in pairs)
    log.info(
        "ingested %s: %d raw records, %d interactions, %d users, %d items",
        path, raw_records, len(interactions), len(users), len(items),
    )
    return DomainDataset(
        users=users, items=items, interactions=interactions, raw_records=raw_records
    )


def _filter_to_users(ds, kept_tokens):
    kept = []
    for u_idx, i_idx in ds.interactions:
        token = ds.users.index_to_token[u_idx]
        if token in kept_tokens:
            kept.append((token, ds.items.index_to_token[i_idx]))
    users = IdMap(kept_tokens)
    items = IdMap(i for _, i in kept)
    interactions = sorted((users[u], items[i]) for u, i in kept)
    return DomainDataset(users=users, items=items, interactions=interactions)


def align_overlapping_users(ds_x, ds_y):
    """Keep only users present in both domains; rebuild index maps."""
    tokens_x = set(ds_x.users.index_to_token)
    tokens_y = set(ds_y.users.index_to_token)
    shared = tokens_x & tokens_y
    if not shared:
        raise AlignmentError(
            f"no overlapping users (domain x has {len(tokens_x)}, "
            f"domain y has {len(tokens_y)})"
        )
    new_x = _filter_to_users(ds_x, shared)
    new_y = _filter_to_users(ds_y, shared)
    cds = CrossDomainDataset(shared_users=new_x.users, domain_x=new_x, domain_y=new_y)
    log.info(
        "aligned: %d shared users, %d/%d interactions",
        len(shared), new_x.num_interactions, new_y.num_interactions,
    )
    return cds


def split_holdout(cds, seed):
    """Random 80/10/10 split per domain; every user keeps >= 1 training pair.

    Users whose interactions all landed in validation/test get one pair
    promoted back to train (from validation first, lowest item index first).
    """
    root = np.random.SeedSequence(seed)
    streams = root.spawn(2)
    split = SplitDataset(dataset=cds, seed=seed)
    for tag, stream in zip(DOMAIN_TAGS, streams):
        ds = cds.domain(tag)
        n = ds.num_interactions
        if n < 10:
            raise CorpusError(f"domain {tag} has only {n} interactions; need >= 10")
        rng = np.random.default_rng(stream)
        order = rng.permutation(n)
        pairs = ds.interactions
        n_train = int(0.8 * n)
        n_val = int(0.1 * n)
        train = [pairs[i] for i in order[:n_train]]
        validation = [pairs[i] for i in order[n_train:n_train + n_val]]
        test = [pairs[i] for i in order[n_train + n_val:]]

        trained_users = {u for u, _ in train}
        promoted = 0
        for part in (validation, test):
            for pair in sorted(part, key=lambda p: (p[0], p[1])):
                user = pair[0]
                if user not in trained_users:
                    part.remove(pair)
                    train.append(pair)
                    trained_users.add(user)
                    promoted += 1
        if promoted:
            log.info("domain %s: promoted %d held-out pairs to train", tag, promoted)

        split.train[tag] = sorted(train)
        split.validation[tag] = sorted(validation)
        split.test[tag] = sorted(test)
        split.reassigned[tag] = promoted
    return split


def build_graph(train_interactions, num_users, num_items):
    """Normalized bipartite adjacency over the training interactions.

    Edge (u, i) carries 1/sqrt(deg(u)*deg(i)) in both directions; degrees
    count training interactions only. Rows of isolated nodes stay empty.
    """
    n_nodes = num_users + num_items
    pairs = np.asarray(list(train_interactions), dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0]:
        bad = (pairs[:, 0] < 0) | (pairs[:, 0] >= num_users) \
            | (pairs[:, 1] < 0) | (pairs[:, 1] >= num_items)
        if bad.any():
            u, i = pairs[np.argmax(bad)]
            raise GraphConstructionError(
                f"interaction ({u}, {i}) out of range for "
                f"{num_users} users / {num_items} items"
            )
    u, i = pairs[:, 0], pairs[:, 1]
    user_deg = np.bincount(u, minlength=num_users)
    item_deg = np.bincount(i, minlength=num_items)
    coef = 1.0 / np.sqrt(user_deg[u] * item_deg[i])

    rows = np.concatenate([u, i + num_users])
    cols = np.concatenate([i + num_users, u])
    coefs = np.concatenate([coef, coef])
    order = np.lexsort((cols, rows))
    rows, cols, coefs = rows[order], cols[order], coefs[order]

    counts = np.bincount(rows, minlength=n_nodes) if rows.shape[0] else \
        np.zeros(n_nodes, dtype=np.int64)
    indptr = np.concatenate([[0], np.cumsum(counts)]).astype(np.int64)
    return DomainGraph(
        num_users=num_users, num_items=num_items,
        indptr=indptr, indices=np.ascontiguousarray(cols),
        data=np.ascontiguousarray(coefs),
    )


def dense_normalized_adjacency(graph):
    """Materialize the graph as a dense matrix (brute-force oracle for tests)."""
    mat = np.zeros((graph.num_nodes, graph.num_nodes))
    for row in range(graph.num_nodes):
        for jj in range(graph.indptr[row], graph.indptr[row + 1]):
            mat[row, graph.indices[jj]] = graph.data[jj]
    return mat


# --- manifest I/O -----------------------------------------------------------

_SPLIT_NAMES = ("train", "validation", "test")


def _write_idmap(path, idmap):
    with open(path, "w", encoding="utf-8") as fh:
        for idx, token in enumerate(idmap.index_to_token):
            fh.write(f"{idx}\t{token}\n")


def _read_idmap(path):
    tokens = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            idx, token = line.rstrip("\n").split("\t")
            if int(idx) != len(tokens):
                raise CorpusError(f"non-contiguous indices in {path}")
            tokens.append(token)
    idmap = IdMap([])
    idmap.index_to_token = tokens
    idmap.token_to_index = {t: i for i, t in enumerate(tokens)}
    return idmap


def _write_pairs(path, pairs):
    with open(path, "w", encoding="utf-8") as fh:
        for u, i in pairs:
            fh.write(f"{u}\t{i}\n")


def _read_pairs(path):
    pairs = []
    with open(path, encoding="utf-8") as fh:
        for line in fh:
            u, i = line.split("\t")
            pairs.append((int(u), int(i)))
    return pairs


def write_manifest(split, out_dir):
    """Write the split manifest: per-domain interaction files plus IdMaps."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cds = split.dataset
    _write_idmap(out / "users.tsv", cds.shared_users)
    for tag in DOMAIN_TAGS:
        _write_idmap(out / f"items_{tag}.tsv", cds.domain(tag).items)
        for part in _SPLIT_NAMES:
            _write_pairs(out / f"{tag}_{part}.tsv", split.part(part)[tag])
    with open(out / "manifest.ini", "w", encoding="utf-8") as fh:
        fh.write("[split]\n")
        fh.write(f"seed = {split.seed}\n")
        for tag in DOMAIN_TAGS:
            fh.write(f"reassigned_{tag} = {split.reassigned[tag]}\n")
    return out


def load_manifest(manifest_dir):
    """Rebuild the SplitDataset exactly as written by write_manifest."""
    root = Path(manifest_dir)
    if not (root / "manifest.ini").exists():
        raise CorpusError(f"no manifest.ini under {root}")
    users = _read_idmap(root / "users.tsv")
    seed = 0
    reassigned = {}
    for line in (root / "manifest.ini").read_text().splitlines():
        if line.startswith("seed"):
            seed = int(line.split("=")[1])
        for tag in DOMAIN_TAGS:
            if line.startswith(f"reassigned_{tag}"):
                reassigned[tag] = int(line.split("=")[1])

    domains = {}
    parts = {name: {} for name in _SPLIT_NAMES}
    for tag in DOMAIN_TAGS:
        items = _read_idmap(root / f"items_{tag}.tsv")
        all_pairs = []
        for part in _SPLIT_NAMES:
            pairs = _read_pairs(root / f"{tag}_{part}.tsv")
            parts[part][tag] = pairs
            all_pairs.extend(pairs)
        domains[tag] = DomainDataset(
            users=users, items=items, interactions=sorted(all_pairs)
        )
    cds = CrossDomainDataset(
        shared_users=users, domain_x=domains["x"], domain_y=domains["y"]
    )
    return SplitDataset(
        dataset=cds, seed=seed,
        train=parts["train"], validation=parts["validation"], test=parts["test"],
        reassigned=reassigned,
    )


def summarize(split):
    """Dataset statistics per domain (users, items, interactions, density)."""
    lines = []
    cds = split.dataset
    for tag in DOMAIN_TAGS:
        ds = cds.domain(tag)
        lines.append(
            f"domain {tag}: {len(ds.users)} users / {len(ds.items)} items / "
            f"{ds.num_interactions} interactions / density {ds.density():.5%} / "
            f"split {len(split.train[tag])}+{len(split.validation[tag])}"
            f"+{len(split.test[tag])}"
        )
    return "\n".join(lines)
