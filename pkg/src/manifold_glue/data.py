"""Graph records, JSONL ingestion, synthetic domain suites, and batching."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "DataError",
    "GraphRecord",
    "DomainDataset",
    "GraphBatch",
    "SyntheticDomainSpec",
    "SyntheticSpec",
    "load_jsonl",
    "save_jsonl",
    "gen_synthetic",
    "ego_sample",
    "make_batches",
]

TASKS = ("node", "link", "graph")
FAMILIES = ("sbm-community", "random-tree", "dense-clique-clusters")

JSONL_KEYS = ("num_nodes", "edges", "features", "label", "domain")


class DataError(ValueError):
    """Malformed or inconsistent dataset input; message names the field."""


@dataclass
class GraphRecord:
    """One attributed graph. Undirected edges, 0-indexed, no self-loops.

    ``node_labels`` is an in-memory extra for large source graphs feeding
    ``ego_sample``; it never appears in the JSONL interchange format.
    """

    num_nodes: int
    edges: list[tuple[int, int]]
    features: np.ndarray
    label: int | None = None
    domain: str = ""
    node_labels: np.ndarray | None = None

    def validate(self) -> None:
        if self.num_nodes <= 0:
            raise DataError(f"num_nodes: must be positive, got {self.num_nodes}")
        for u, v in self.edges:
            if u == v:
                raise DataError(f"edges: self-loop ({u},{v}) is not allowed in stored form")
            if not (0 <= u < self.num_nodes and 0 <= v < self.num_nodes):
                raise DataError(f"edges: endpoint ({u},{v}) out of range for {self.num_nodes} nodes")
        if self.features.ndim != 2 or self.features.shape[0] != self.num_nodes:
            raise DataError(
                f"features: expected {self.num_nodes} rows, got shape {self.features.shape}")

    def neighbors(self) -> list[list[int]]:
        adj: list[list[int]] = [[] for _ in range(self.num_nodes)]
        for u, v in self.edges:
            adj[u].append(v)
            adj[v].append(u)
        return [sorted(a) for a in adj]


@dataclass
class DomainDataset:
    """A named collection of graph records sharing a feature space and task.

    ``record_edges`` links records whose source nodes were adjacent in the
    original large graph (set by ``ego_sample``); stage-3 refinement uses it
    as a ready-made skeleton instead of a KNN graph.
    """

    name: str
    records: list[GraphRecord]
    task: str
    num_classes: int
    feature_dim: int
    record_edges: list[tuple[int, int]] | None = None

    def validate(self) -> None:
        if self.task not in TASKS:
            raise DataError(f"task: must be one of {TASKS}, got {self.task!r}")
        for i, rec in enumerate(self.records):
            rec.validate()
            if rec.domain != self.name:
                raise DataError(f"domain: record {i} tagged {rec.domain!r}, dataset is {self.name!r}")
            if rec.features.shape[1] != self.feature_dim:
                raise DataError(
                    f"features: record {i} has dim {rec.features.shape[1]}, dataset has {self.feature_dim}")


@dataclass
class GraphBatch:
    """Records plus node offsets for block-diagonal assembly."""

    records: list[GraphRecord]
    offsets: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.offsets:
            acc = 0
            self.offsets = []
            for rec in self.records:
                acc += rec.num_nodes
                self.offsets.append(acc)

    def __len__(self) -> int:
        return len(self.records)


# ---------------------------------------------------------------------------
# JSONL interchange
# ---------------------------------------------------------------------------

def _record_from_obj(obj: dict, line_no: int) -> GraphRecord:
    if set(obj.keys()) != set(JSONL_KEYS):
        missing = set(JSONL_KEYS) - set(obj.keys())
        extra = set(obj.keys()) - set(JSONL_KEYS)
        raise DataError(f"line {line_no}: keys must be exactly {JSONL_KEYS}; "
                        f"missing {sorted(missing)}, unexpected {sorted(extra)}")
    try:
        rec = GraphRecord(
            num_nodes=int(obj["num_nodes"]),
            edges=[(int(u), int(v)) for u, v in obj["edges"]],
            features=np.asarray(obj["features"], dtype=np.float64).reshape(
                int(obj["num_nodes"]), -1),
            label=None if obj["label"] is None else int(obj["label"]),
            domain=str(obj["domain"]),
        )
    except (TypeError, ValueError) as exc:
        raise DataError(f"line {line_no}: {exc}") from exc
    try:
        rec.validate()
    except DataError as exc:
        raise DataError(f"line {line_no}: {exc}") from exc
    return rec


def load_jsonl(path: str | Path, task: str = "graph") -> DomainDataset:
    """Parse one dataset from a JSONL file, validating every record.

    The interchange format carries records only; the task tag comes from the
    caller (the suite manifest supplies it for generated suites).
    """
    path = Path(path)
    records: list[GraphRecord] = []
    with path.open("r", encoding="utf-8") as fh:
        for line_no, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise DataError(f"line {line_no}: invalid JSON ({exc.msg})") from exc
            records.append(_record_from_obj(obj, line_no))
    if not records:
        raise DataError(f"{path}: empty dataset")
    name = records[0].domain
    labels = [r.label for r in records if r.label is not None]
    ds = DomainDataset(
        name=name,
        records=records,
        task=task,
        num_classes=(max(labels) + 1) if labels else 0,
        feature_dim=records[0].features.shape[1],
    )
    ds.validate()
    return ds


def save_jsonl(dataset: DomainDataset, path: str | Path) -> None:
    path = Path(path)
    with path.open("w", encoding="utf-8") as fh:
        for rec in dataset.records:
            obj = {
                "num_nodes": rec.num_nodes,
                "edges": [[u, v] for u, v in rec.edges],
                "features": [[float(x) for x in row] for row in rec.features],
                "label": rec.label,
                "domain": rec.domain,
            }
            fh.write(json.dumps(obj) + "\n")


# ---------------------------------------------------------------------------
# synthetic multi-domain generation
# ---------------------------------------------------------------------------

@dataclass
class SyntheticDomainSpec:
    name: str
    family: str
    task: str
    classes: int
    records: int
    nodes: tuple[int, int]
    feature_dim: int
    feature_offset: float = 1.0
    feature_scale: float = 1.0

    _FIELDS = ("name", "family", "task", "classes", "records", "nodes",
               "feature_dim", "feature_offset", "feature_scale")

    @classmethod
    def from_obj(cls, obj: dict) -> "SyntheticDomainSpec":
        unknown = set(obj.keys()) - set(cls._FIELDS)
        if unknown:
            raise DataError(f"synthetic spec: unknown key {sorted(unknown)[0]!r}")
        for key in ("name", "family", "task", "classes", "records", "nodes", "feature_dim"):
            if key not in obj:
                raise DataError(f"synthetic spec: missing key {key!r}")
        spec = cls(
            name=str(obj["name"]),
            family=str(obj["family"]),
            task=str(obj["task"]),
            classes=int(obj["classes"]),
            records=int(obj["records"]),
            nodes=(int(obj["nodes"][0]), int(obj["nodes"][1])),
            feature_dim=int(obj["feature_dim"]),
            feature_offset=float(obj.get("feature_offset", 1.0)),
            feature_scale=float(obj.get("feature_scale", 1.0)),
        )
        if spec.family not in FAMILIES:
            raise DataError(f"synthetic spec: family must be one of {FAMILIES}, got {spec.family!r}")
        if spec.task not in TASKS:
            raise DataError(f"synthetic spec: task must be one of {TASKS}, got {spec.task!r}")
        if spec.classes < 1 or spec.records < 1:
            raise DataError("synthetic spec: classes and records must be positive")
        if spec.nodes[0] < 1 or spec.nodes[1] < spec.nodes[0]:
            raise DataError(f"synthetic spec: bad node range {spec.nodes}")
        return spec


@dataclass
class SyntheticSpec:
    domains: list[SyntheticDomainSpec]

    @classmethod
    def from_obj(cls, obj: dict) -> "SyntheticSpec":
        unknown = set(obj.keys()) - {"domains"}
        if unknown:
            raise DataError(f"synthetic spec: unknown key {sorted(unknown)[0]!r}")
        domains = [SyntheticDomainSpec.from_obj(d) for d in obj.get("domains", [])]
        if not domains:
            raise DataError("synthetic spec: domain list is empty")
        return cls(domains=domains)

    @classmethod
    def from_json(cls, text: str) -> "SyntheticSpec":
        return cls.from_obj(json.loads(text))


def _class_means(classes: int, dim: int, offset: float) -> np.ndarray:
    # deterministic well-separated means: scaled one-hot, wrapping over dims
    means = np.zeros((classes, dim))
    for c in range(classes):
        means[c, c % dim] = offset
        means[c, (c + 1) % dim] = 0.5 * offset if classes > dim else means[c, (c + 1) % dim]
    return means


def _features_for(labels: np.ndarray, spec: SyntheticDomainSpec, rng: np.random.Generator) -> np.ndarray:
    means = _class_means(spec.classes, spec.feature_dim, spec.feature_offset)
    noise = rng.normal(0.0, spec.feature_scale, size=(labels.size, spec.feature_dim))
    return means[labels] + noise


def _edges_sorted(edge_set: set[tuple[int, int]]) -> list[tuple[int, int]]:
    return sorted((min(u, v), max(u, v)) for u, v in edge_set)


def _gen_sbm_graph(n: int, blocks: int, rng: np.random.Generator,
                   p_in: float = 0.55, p_out: float = 0.06) -> tuple[list[tuple[int, int]], np.ndarray]:
    membership = np.sort(np.arange(n) % blocks)
    edges = set()
    for u in range(n):
        for v in range(u + 1, n):
            p = p_in if membership[u] == membership[v] else p_out
            if rng.random() < p:
                edges.add((u, v))
    # keep things connected so ego sampling and diffusion are well posed
    order = rng.permutation(n)
    for a, b in zip(order[:-1], order[1:]):
        u, v = (min(a, b), max(a, b))
        if membership[a] != membership[b] and rng.random() < 0.5:
            continue
        edges.add((int(u), int(v)))
    return _edges_sorted(edges), membership


def _gen_tree(n: int, star_bias: float, rng: np.random.Generator) -> list[tuple[int, int]]:
    # star_bias 0 -> path-like chain, 1 -> hub-and-spoke
    edges = []
    for v in range(1, n):
        if rng.random() < star_bias:
            u = 0
        else:
            u = v - 1 if rng.random() < 0.7 else int(rng.integers(0, v))
        edges.append((min(u, v), max(u, v)))
    return sorted(edges)


def _gen_clique_clusters(n: int, k_cliques: int, rng: np.random.Generator,
                         ) -> tuple[list[tuple[int, int]], np.ndarray]:
    sizes = np.full(k_cliques, n // k_cliques)
    sizes[: n % k_cliques] += 1
    membership = np.repeat(np.arange(k_cliques), sizes)
    edges = set()
    start = 0
    anchors = []
    for s in sizes:
        block = range(start, start + s)
        for u in block:
            for v in block:
                if u < v:
                    edges.add((u, v))
        anchors.append(start)
        start += s
    for a, b in zip(anchors[:-1], anchors[1:]):
        edges.add((min(a, b), max(a, b)))
    return _edges_sorted(edges), membership


def _gen_graph_task(spec: SyntheticDomainSpec, rng: np.random.Generator) -> list[GraphRecord]:
    records = []
    for _ in range(spec.records):
        label = int(rng.integers(0, spec.classes))
        n = int(rng.integers(spec.nodes[0], spec.nodes[1] + 1))
        if spec.family == "sbm-community":
            edges, _ = _gen_sbm_graph(n, blocks=label + 2, rng=rng)
        elif spec.family == "random-tree":
            star_bias = label / max(1, spec.classes - 1)
            edges = _gen_tree(n, star_bias, rng)
        else:
            edges, _ = _gen_clique_clusters(n, k_cliques=label + 2, rng=rng)
        labels = np.full(n, label)
        feats = _features_for(labels, spec, rng)
        records.append(GraphRecord(n, edges, feats, label=label, domain=spec.name))
    return records


def _gen_source_graph(spec: SyntheticDomainSpec, rng: np.random.Generator) -> GraphRecord:
    n = spec.records
    if spec.family == "sbm-community":
        edges, membership = _gen_sbm_graph(n, blocks=spec.classes, rng=rng)
    elif spec.family == "random-tree":
        edges = _gen_tree(n, star_bias=0.15, rng=rng)
        # label by root-branch: neighbors overwhelmingly share a branch
        adj = GraphRecord(n, edges, np.zeros((n, 1))).neighbors()
        membership = np.zeros(n, dtype=int)
        branch = 0
        stack = []
        for child in adj[0]:
            membership[child] = branch % spec.classes
            stack.append(child)
            branch += 1
        seen = {0, *stack}
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in seen:
                    membership[v] = membership[u]
                    seen.add(v)
                    stack.append(v)
    else:
        edges, membership = _gen_clique_clusters(n, k_cliques=spec.classes, rng=rng)
        membership = membership % spec.classes
    feats = _features_for(np.asarray(membership), spec, rng)
    return GraphRecord(n, edges, feats, label=None, domain=spec.name,
                       node_labels=np.asarray(membership, dtype=int))


def _gen_node_task(spec: SyntheticDomainSpec, rng: np.random.Generator) -> DomainDataset:
    source = _gen_source_graph(spec, rng)
    seed = int(rng.integers(0, 2**31 - 1))
    return ego_sample(source, hops=2, fanout=10, seed=seed)


def _gen_link_task(spec: SyntheticDomainSpec, rng: np.random.Generator) -> DomainDataset:
    source = _gen_source_graph(spec, rng)
    adj = source.neighbors()
    labels = source.node_labels
    edge_pool = list(source.edges)
    records = []
    for _ in range(spec.records):
        u, v = edge_pool[int(rng.integers(0, len(edge_pool)))]
        hood = {u, v}
        for w in (u, v):
            nbrs = [x for x in adj[w] if x not in hood]
            take = min(5, len(nbrs))
            if take:
                picked = rng.choice(len(nbrs), size=take, replace=False)
                hood.update(nbrs[i] for i in sorted(picked))
        # endpoints first, by convention, so the head knows where the pair is
        order = [u, v] + sorted(hood - {u, v})
        remap = {old: new for new, old in enumerate(order)}
        sub_edges = sorted(
            (min(remap[a], remap[b]), max(remap[a], remap[b]))
            for a, b in source.edges if a in hood and b in hood)
        label = int((labels[u] + labels[v]) % spec.classes)
        records.append(GraphRecord(len(order), sub_edges, source.features[order].copy(),
                                   label=label, domain=spec.name))
    ds = DomainDataset(spec.name, records, "link", spec.classes, spec.feature_dim)
    ds.validate()
    return ds


def gen_synthetic(spec: SyntheticSpec, seed: int) -> list[DomainDataset]:
    """Generate the suite; a pure function of (spec, seed)."""
    if not spec.domains:
        raise DataError("synthetic spec: domain list is empty")
    out = []
    for idx, dom in enumerate(spec.domains):
        rng = np.random.default_rng([seed, idx])
        if dom.task == "graph":
            records = _gen_graph_task(dom, rng)
            ds = DomainDataset(dom.name, records, "graph", dom.classes, dom.feature_dim)
        elif dom.task == "node":
            ds = _gen_node_task(dom, rng)
        else:
            ds = _gen_link_task(dom, rng)
        ds.validate()
        out.append(ds)
    return out


# ---------------------------------------------------------------------------
# ego sampling and batching
# ---------------------------------------------------------------------------

def ego_sample(record: GraphRecord, hops: int = 2, fanout: int = 10,
               seed: int = 0) -> DomainDataset:
    """Materialize one ego-graph per node of a large labeled graph.

    The center sits at index 0 of each ego record and donates its label.
    Neighbor sampling is without replacement, at most ``fanout`` per node per
    hop. Records whose centers were adjacent in the source graph are linked
    in ``record_edges``.
    """
    if record.node_labels is None:
        raise DataError("node_labels: ego sampling needs per-node labels on the source graph")
    rng = np.random.default_rng(seed)
    adj = record.neighbors()
    records = []
    for center in range(record.num_nodes):
        visited = {center}
        frontier = [center]
        for _ in range(hops):
            nxt = []
            for u in frontier:
                fresh = [v for v in adj[u] if v not in visited]
                take = min(fanout, len(fresh))
                if take == 0:
                    continue
                picked = rng.choice(len(fresh), size=take, replace=False)
                for i in sorted(picked):
                    visited.add(fresh[i])
                    nxt.append(fresh[i])
            frontier = nxt
        order = [center] + sorted(visited - {center})
        remap = {old: new for new, old in enumerate(order)}
        sub_edges = sorted(
            (min(remap[a], remap[b]), max(remap[a], remap[b]))
            for a, b in record.edges if a in visited and b in visited)
        records.append(GraphRecord(len(order), sub_edges, record.features[order].copy(),
                                   label=int(record.node_labels[center]),
                                   domain=record.domain))
    ds = DomainDataset(
        name=record.domain,
        records=records,
        task="node",
        num_classes=int(record.node_labels.max()) + 1,
        feature_dim=record.features.shape[1],
        record_edges=[(u, v) for u, v in record.edges],
    )
    ds.validate()
    return ds


def make_batches(datasets: list[DomainDataset], batch_size: int,
                 seed: int | np.random.Generator) -> list[GraphBatch]:
    """One epoch of mixture batches: domains are drawn uniformly while any
    remain, and every record appears exactly once."""
    if batch_size < 1:
        raise DataError(f"batch_size: must be >= 1, got {batch_size}")
    rng = np.random.default_rng(seed)
    queues = []
    for ds in datasets:
        idx = rng.permutation(len(ds.records))
        queues.append([ds.records[i] for i in idx])
    ordered = []
    live = [q for q in queues if q]
    while live:
        pick = int(rng.integers(0, len(live)))
        ordered.append(live[pick].pop())
        live = [q for q in live if q]
    return [GraphBatch(ordered[i:i + batch_size])
            for i in range(0, len(ordered), batch_size)]
