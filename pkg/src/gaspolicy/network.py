"""Gas network data model, file ingestion and structural validation."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

EDGE_KINDS = ("passive", "compressor", "valve")

NODE_FIELDS = (
    "pressure_min",
    "pressure_max",
    "injection_min",
    "injection_max",
    "cost_linear",
    "cost_quadratic",
    "extraction_mean",
    "extraction_stddev",
)


class NetworkError(ValueError):
    """Base class for network file problems."""


class NetworkParseError(NetworkError):
    """The network file is malformed or misses required fields."""


class NetworkValidationError(NetworkError):
    """A structural or physical invariant of the network is violated."""


def _frozen(values, dtype=float) -> np.ndarray:
    arr = np.array(values, dtype=dtype)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True, eq=False)
class GasNetwork:
    """Immutable topology plus physical and economic parameters.

    Node and edge order follow the input file; every matrix built from a
    network uses that order. Per-edge arrays (``b``, ``kappa_min``,
    ``kappa_max``) carry zeros on passive edges. Pressures are squared
    pressures.
    """

    nodes: tuple[str, ...]
    edges: tuple[tuple[str, str], ...]
    kinds: tuple[str, ...]
    w: np.ndarray
    b: np.ndarray
    kappa_min: np.ndarray
    kappa_max: np.ndarray
    pressure_min: np.ndarray
    pressure_max: np.ndarray
    injection_min: np.ndarray
    injection_max: np.ndarray
    cost_linear: np.ndarray
    cost_quadratic: np.ndarray
    extraction_mean: np.ndarray
    extraction_stddev: np.ndarray
    reference_node: str
    correlation: np.ndarray | None = None
    name: str = "network"
    _index: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "_index", {n: k for k, n in enumerate(self.nodes)})

    @property
    def n_nodes(self) -> int:
        return len(self.nodes)

    @property
    def n_edges(self) -> int:
        return len(self.edges)

    def node_index(self, node_id) -> int:
        return self._index[str(node_id)]

    def edge_index(self, sender, receiver) -> int:
        return self.edges.index((str(sender), str(receiver)))

    @property
    def ref(self) -> int:
        """Index of the reference node."""
        return self._index[self.reference_node]

    @property
    def active(self) -> np.ndarray:
        return np.array([k != "passive" for k in self.kinds], dtype=bool)

    @property
    def compressors(self) -> np.ndarray:
        return np.array([k == "compressor" for k in self.kinds], dtype=bool)

    @property
    def valves(self) -> np.ndarray:
        return np.array([k == "valve" for k in self.kinds], dtype=bool)

    @property
    def suppliers(self) -> np.ndarray:
        """Nodes with a controllable injection range."""
        return self.injection_max > self.injection_min

    @property
    def stochastic(self) -> np.ndarray:
        return self.extraction_stddev > 0

    def endpoints(self) -> tuple[np.ndarray, np.ndarray]:
        send = np.array([self._index[s] for s, _ in self.edges], dtype=int)
        recv = np.array([self._index[r] for _, r in self.edges], dtype=int)
        return send, recv

    def replace(self, **changes) -> "GasNetwork":
        """Copy of the network with some fields replaced, re-validated."""
        data = self.to_dict()
        node_changes = {k: v for k, v in changes.items() if k in NODE_FIELDS}
        for key, values in node_changes.items():
            values = np.broadcast_to(np.asarray(values, dtype=float), (self.n_nodes,))
            for rec, v in zip(data["nodes"], values):
                rec[key] = float(v)
        edge_keys = {"w": "w", "b": "b", "kappa_min": "kappa_min", "kappa_max": "kappa_max"}
        for key, target in edge_keys.items():
            if key in changes:
                values = np.broadcast_to(np.asarray(changes[key], dtype=float), (self.n_edges,))
                for rec, v in zip(data["edges"], values):
                    rec[target] = float(v)
        if "reference_node" in changes:
            data["reference_node"] = str(changes["reference_node"])
        if "correlation" in changes:
            corr = changes["correlation"]
            data["correlation"] = None if corr is None else np.asarray(corr).tolist()
        if "name" in changes:
            data["name"] = changes["name"]
        unknown = set(changes) - set(NODE_FIELDS) - set(edge_keys) - {"reference_node", "correlation", "name"}
        if unknown:
            raise TypeError(f"cannot replace fields {sorted(unknown)}")
        return network_from_dict(data)

    def to_dict(self) -> dict[str, Any]:
        nodes = []
        for k, node_id in enumerate(self.nodes):
            rec: dict[str, Any] = {"id": node_id}
            for key in NODE_FIELDS:
                rec[key] = float(getattr(self, key)[k])
            nodes.append(rec)
        edges = []
        for l, (s, r) in enumerate(self.edges):
            rec = {"from": s, "to": r, "w": float(self.w[l]), "kind": self.kinds[l]}
            if self.kinds[l] != "passive":
                rec["b"] = float(self.b[l])
                rec["kappa_min"] = float(self.kappa_min[l])
                rec["kappa_max"] = float(self.kappa_max[l])
            edges.append(rec)
        out: dict[str, Any] = {
            "name": self.name,
            "reference_node": self.reference_node,
            "nodes": nodes,
            "edges": edges,
        }
        if self.correlation is not None:
            out["correlation"] = self.correlation.tolist()
        return out


def _require(rec: dict, key: str, where: str):
    if key not in rec:
        raise NetworkParseError(f"{where}: missing field '{key}'")
    return rec[key]


def _number(value, where: str) -> float:
    try:
        out = float(value)
    except (TypeError, ValueError) as exc:
        raise NetworkParseError(f"{where}: expected a number, got {value!r}") from exc
    if not np.isfinite(out):
        raise NetworkParseError(f"{where}: non-finite value {value!r}")
    return out


def network_from_dict(data: dict[str, Any]) -> GasNetwork:
    """Build and validate a network from its parsed document."""
    if not isinstance(data, dict):
        raise NetworkParseError("top level must be a mapping")
    raw_nodes = _require(data, "nodes", "network")
    raw_edges = _require(data, "edges", "network")
    if not isinstance(raw_nodes, list) or not isinstance(raw_edges, list):
        raise NetworkParseError("'nodes' and 'edges' must be lists")
    if not raw_nodes:
        raise NetworkValidationError("network has no nodes")

    ids: list[str] = []
    cols: dict[str, list[float]] = {key: [] for key in NODE_FIELDS}
    for k, rec in enumerate(raw_nodes):
        where = f"nodes[{k}]"
        if not isinstance(rec, dict):
            raise NetworkParseError(f"{where}: expected a mapping")
        ids.append(str(_require(rec, "id", where)))
        for key in NODE_FIELDS:
            default = 0.0 if key in ("cost_linear", "cost_quadratic", "extraction_mean", "extraction_stddev") else None
            value = rec.get(key, default)
            if value is None:
                raise NetworkParseError(f"{where}: missing field '{key}'")
            cols[key].append(_number(value, f"{where}.{key}"))
    if len(set(ids)) != len(ids):
        raise NetworkValidationError("duplicate node ids")

    edges: list[tuple[str, str]] = []
    kinds: list[str] = []
    w, b, kmin, kmax = [], [], [], []
    for l, rec in enumerate(raw_edges):
        where = f"edges[{l}]"
        if not isinstance(rec, dict):
            raise NetworkParseError(f"{where}: expected a mapping")
        s = str(_require(rec, "from", where))
        r = str(_require(rec, "to", where))
        kind = str(rec.get("kind", "passive"))
        if kind not in EDGE_KINDS:
            raise NetworkParseError(f"{where}: unknown kind '{kind}'")
        edges.append((s, r))
        kinds.append(kind)
        w.append(_number(_require(rec, "w", where), f"{where}.w"))
        if kind == "passive":
            b.append(0.0)
            kmin.append(0.0)
            kmax.append(0.0)
        else:
            b.append(_number(_require(rec, "b", where), f"{where}.b"))
            kmin.append(_number(_require(rec, "kappa_min", where), f"{where}.kappa_min"))
            kmax.append(_number(_require(rec, "kappa_max", where), f"{where}.kappa_max"))

    corr = data.get("correlation")
    if corr is not None:
        try:
            corr = np.array(corr, dtype=float)
        except (TypeError, ValueError) as exc:
            raise NetworkParseError("correlation: expected a numeric matrix") from exc

    if "reference_node" not in data:
        raise NetworkParseError("network: missing field 'reference_node'")

    net = GasNetwork(
        nodes=tuple(ids),
        edges=tuple(edges),
        kinds=tuple(kinds),
        w=_frozen(w),
        b=_frozen(b),
        kappa_min=_frozen(kmin),
        kappa_max=_frozen(kmax),
        pressure_min=_frozen(cols["pressure_min"]),
        pressure_max=_frozen(cols["pressure_max"]),
        injection_min=_frozen(cols["injection_min"]),
        injection_max=_frozen(cols["injection_max"]),
        cost_linear=_frozen(cols["cost_linear"]),
        cost_quadratic=_frozen(cols["cost_quadratic"]),
        extraction_mean=_frozen(cols["extraction_mean"]),
        extraction_stddev=_frozen(cols["extraction_stddev"]),
        reference_node=str(data["reference_node"]),
        correlation=None if corr is None else _frozen(corr),
        name=str(data.get("name", "network")),
    )
    validate(net)
    return net


def validate(net: GasNetwork) -> None:
    """Raise NetworkValidationError naming the first violated invariant."""
    index = {n: k for k, n in enumerate(net.nodes)}
    seen: set[frozenset] = set()
    for l, (s, r) in enumerate(net.edges):
        for end in (s, r):
            if end not in index:
                raise NetworkValidationError(f"edge {l} ({s},{r}): unknown node '{end}'")
        if s == r:
            raise NetworkValidationError(f"edge {l} ({s},{r}): self-loop")
        key = frozenset((s, r))
        if key in seen:
            raise NetworkValidationError(f"edge {l} ({s},{r}): parallel edge")
        seen.add(key)
        if net.w[l] <= 0:
            raise NetworkValidationError(f"edge {l} ({s},{r}): w must be positive")
        kind = net.kinds[l]
        if kind != "passive" and net.b[l] <= 0:
            raise NetworkValidationError(f"edge {l} ({s},{r}): b must be positive on active edges")
        if net.kappa_min[l] > net.kappa_max[l]:
            raise NetworkValidationError(f"edge {l} ({s},{r}): kappa_min > kappa_max")
        if kind == "compressor" and net.kappa_min[l] < 0:
            raise NetworkValidationError(f"edge {l} ({s},{r}): compressor kappa_min must be >= 0")
        if kind == "valve" and net.kappa_max[l] > 0:
            raise NetworkValidationError(f"edge {l} ({s},{r}): valve kappa_max must be <= 0")

    if not _connected(net.n_nodes, [(index[s], index[r]) for s, r in net.edges]):
        raise NetworkValidationError("underlying undirected graph is not connected")

    for k, node_id in enumerate(net.nodes):
        if net.pressure_min[k] > net.pressure_max[k]:
            raise NetworkValidationError(f"node {node_id}: pressure_min > pressure_max")
        if net.pressure_min[k] < 0:
            raise NetworkValidationError(f"node {node_id}: negative squared pressure limit")
        if net.injection_min[k] > net.injection_max[k]:
            raise NetworkValidationError(f"node {node_id}: injection_min > injection_max")
        if net.cost_quadratic[k] < 0:
            raise NetworkValidationError(f"node {node_id}: cost_quadratic must be >= 0")
        if net.extraction_stddev[k] < 0:
            raise NetworkValidationError(f"node {node_id}: extraction_stddev must be >= 0")

    ref = net.reference_node
    if ref not in index:
        raise NetworkValidationError(f"reference node '{ref}' is not a node")
    if net.extraction_stddev[index[ref]] > 0:
        raise NetworkValidationError(f"reference node '{ref}' hosts a stochastic extraction")
    for l, (s, r) in enumerate(net.edges):
        if net.kinds[l] != "passive" and ref in (s, r):
            raise NetworkValidationError(f"reference node '{ref}' is an endpoint of active edge ({s},{r})")

    if net.correlation is not None:
        c = net.correlation
        if c.shape != (net.n_nodes, net.n_nodes):
            raise NetworkValidationError(f"correlation: expected shape {(net.n_nodes, net.n_nodes)}, got {c.shape}")
        if not np.allclose(c, c.T, atol=1e-12):
            raise NetworkValidationError("correlation: matrix is not symmetric")
        sto = net.extraction_stddev > 0
        if not np.allclose(np.diag(c)[sto], 1.0):
            raise NetworkValidationError("correlation: diagonal must be 1 on stochastic nodes")


def _connected(n: int, pairs: list[tuple[int, int]]) -> bool:
    adj: list[list[int]] = [[] for _ in range(n)]
    for a, c in pairs:
        adj[a].append(c)
        adj[c].append(a)
    seen = {0}
    stack = [0]
    while stack:
        k = stack.pop()
        for j in adj[k]:
            if j not in seen:
                seen.add(j)
                stack.append(j)
    return len(seen) == n


def load_network(path: str | Path) -> GasNetwork:
    """Read and validate a network file (JSON document)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise NetworkParseError(f"{path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise NetworkParseError(f"{path}: {exc}") from exc
    return network_from_dict(data)


def dumps_network(net: GasNetwork) -> str:
    return json.dumps(net.to_dict(), indent=2)


def save_network(net: GasNetwork, path: str | Path) -> None:
    Path(path).write_text(dumps_network(net) + "\n", encoding="utf-8")


def incidence_matrix(net: GasNetwork) -> np.ndarray:
    """Node-edge incidence: +1 at the sending node, -1 at the receiving node."""
    A = np.zeros((net.n_nodes, net.n_edges))
    send, recv = net.endpoints()
    cols = np.arange(net.n_edges)
    A[send, cols] = 1.0
    A[recv, cols] = -1.0
    return A


def active_incidence(net: GasNetwork) -> np.ndarray:
    """Fuel-extraction map of active edges onto their sending nodes.

    Compressor columns carry ``+b`` and valve columns ``-b`` so that ``B @ kappa``
    is non-negative whenever kappa respects the sign limits.
    """
    B = np.zeros((net.n_nodes, net.n_edges))
    send, _ = net.endpoints()
    for l, kind in enumerate(net.kinds):
        if kind == "compressor":
            B[send[l], l] = net.b[l]
        elif kind == "valve":
            B[send[l], l] = -net.b[l]
    return B
