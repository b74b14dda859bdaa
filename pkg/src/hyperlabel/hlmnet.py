"""The hyper label model: a GNN over the non-abstaining entries of a label matrix.

Every non-zero entry X[i, j] is a node. A layer pools node embeddings over the
node's column, its row and the whole graph (each pool includes the node
itself), projects the three pools and the node's own embedding with separate
d x d maps, concatenates them and applies an affine map followed by ReLU.
After the last layer node embeddings are averaged per row and a three-layer
MLP with a sigmoid output gives P(y_i = +1).

Edges are never materialised, so a layer costs O(number of present nodes).
Several matrices can be encoded together as one disjoint graph, which is how
training batches are processed.
"""
from __future__ import annotations

import json
import math
import os
from dataclasses import dataclass

import numpy as np

from . import gradkernel as gk
from .errors import (
    ContractViolation,
    CorruptModelError,
    ModelShapeError,
    ModelVersionError,
    NonFiniteError,
)
from .labelcore import as_binary

FORMAT_VERSION = 1


@dataclass
class ModelParams:
    K: int
    d: int
    arrays: dict
    version: int = FORMAT_VERSION

    def copy(self):
        return ModelParams(self.K, self.d, {k: v.copy() for k, v in self.arrays.items()}, self.version)

    def equals(self, other) -> bool:
        return (
            self.K == other.K
            and self.d == other.d
            and self.arrays.keys() == other.arrays.keys()
            and all(np.array_equal(self.arrays[k], other.arrays[k]) for k in self.arrays)
        )


def param_shapes(K: int, d: int) -> dict:
    """Name -> shape for every learnable array, in serialisation order."""
    shapes = {"embed": (2, d)}
    for k in range(K):
        for w in ("W1", "W2", "W3", "W4"):
            shapes[f"layer{k}.{w}"] = (d, d)
        shapes[f"layer{k}.f_weight"] = (4 * d, d)
        shapes[f"layer{k}.f_bias"] = (d,)
    shapes["head0.weight"] = (d, d)
    shapes["head0.bias"] = (d,)
    shapes["head1.weight"] = (d, d)
    shapes["head1.bias"] = (d,)
    shapes["head2.weight"] = (d, 1)
    shapes["head2.bias"] = (1,)
    return shapes


def _fan_in(name, shape):
    if name == "embed":
        return 1
    if name.endswith("bias"):
        # bias shares the bound of its weight matrix
        return None
    return shape[0]


def init_bound(name: str, K: int, d: int) -> float:
    shapes = param_shapes(K, d)
    if name.endswith("bias"):
        weight = name.replace("f_bias", "f_weight").replace("bias", "weight")
        return 1.0 / math.sqrt(shapes[weight][0])
    return 1.0 / math.sqrt(_fan_in(name, shapes[name]))


def init_params(K: int = 4, d: int = 16, seed: int = 0) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation."""
    if K < 1 or d < 1:
        raise ContractViolation(f"K and d must be >= 1, got K={K}, d={d}")
    rng = np.random.default_rng(seed)
    arrays = {}
    for name, shape in param_shapes(K, d).items():
        bound = init_bound(name, K, d)
        arrays[name] = rng.uniform(-bound, bound, size=shape)
    return ModelParams(K, d, arrays)


# ---------------------------------------------------------------------------
# graph encoding


class GraphView:
    """Present-node index structure for one or more label matrices.

    Nodes are the non-zero entries in row-major order, matrix after matrix.
    Rows and columns are numbered globally across the stacked matrices.
    """

    def __init__(self, matrices):
        matrices = [as_binary(X) for X in matrices]
        if not matrices:
            raise ContractViolation("no matrices to encode")
        rows, cols, signs, graph_of_node, graph_of_row = [], [], [], [], []
        row_offset = col_offset = 0
        self.row_offsets = []
        for g, X in enumerate(matrices):
            r, c = np.nonzero(X)
            rows.append(r + row_offset)
            cols.append(c + col_offset)
            signs.append(X[r, c])
            graph_of_node.append(np.full(r.size, g))
            graph_of_row.append(np.full(X.shape[0], g))
            self.row_offsets.append(row_offset)
            row_offset += X.shape[0]
            col_offset += X.shape[1]
        self.shapes = [X.shape for X in matrices]
        self.num_rows = row_offset
        self.num_cols = col_offset
        self.node_row = np.concatenate(rows)
        self.node_col = np.concatenate(cols)
        self.node_value = np.concatenate(signs)
        self.node_graph = np.concatenate(graph_of_node)
        self.row_graph = np.concatenate(graph_of_row)
        self.num_nodes = self.node_row.size
        if self.num_nodes == 0:
            raise ContractViolation("empty label matrix: every entry abstains")
        per_graph = np.bincount(self.node_graph, minlength=len(matrices))
        if (per_graph == 0).any():
            raise ContractViolation(
                f"empty label matrix: matrix {int(np.argmin(per_graph))} has no votes"
            )

        # compact ids over rows/columns that own at least one node
        self.present_rows, row_ids = np.unique(self.node_row, return_inverse=True)
        present_cols, col_ids = np.unique(self.node_col, return_inverse=True)
        self.row_groups = gk.Grouping(row_ids, self.present_rows.size)
        self.col_groups = gk.Grouping(col_ids, present_cols.size)
        self.graph_groups = gk.Grouping(self.node_graph, len(matrices))
        self.rows_by_graph = gk.Grouping(self.row_graph, len(matrices))
        # nodes are row-major, so each present row is a contiguous node run
        self.row_counts = self.row_groups.counts
        self.present_row_graph = self.row_graph[self.present_rows]
        self.graph_of_rows = gk.Grouping(self.present_row_graph, len(matrices))
        self.graph_counts = per_graph
        # embedding row: 0 for a +1 vote, 1 for a -1 vote
        self.embed_index = (self.node_value == -1).astype(np.int64)

    @property
    def num_graphs(self):
        return len(self.shapes)

    def row_lists(self, graph=0):
        """Node ids per row of one matrix (empty list for all-abstain rows)."""
        n = self.shapes[graph][0]
        off = self.row_offsets[graph]
        out = [[] for _ in range(n)]
        for node in np.flatnonzero(self.node_graph == graph):
            out[self.node_row[node] - off].append(int(node))
        return out

    def col_lists(self, graph=0):
        m = self.shapes[graph][1]
        off = sum(s[1] for s in self.shapes[:graph])
        out = [[] for _ in range(m)]
        for node in np.flatnonzero(self.node_graph == graph):
            out[self.node_col[node] - off].append(int(node))
        return out


def encode(X) -> GraphView:
    return GraphView([X])


# ---------------------------------------------------------------------------
# forward pass


def _affine(x, weight, bias):
    return gk.add(gk.matmul(x, weight), bias)


def _layer(V: gk.Tensor, graph: GraphView, Wc, Wr, Wg, Wo, bias) -> gk.Tensor:
    """One message-passing layer as a single recorded op.

    relu(V @ Wo + colmean[col] @ Wc + rowmean[row] @ Wr + graphmean @ Wg + bias),
    where each W* is already the product W_i @ F_block_i. Graph sums are taken
    from row sums and rows are contiguous node runs, which keeps the number of
    passes over node-level arrays small.
    """
    v = V.value
    cols, rows = graph.col_groups, graph.row_groups
    c_cnt = cols.counts[:, None]
    r_cnt = graph.row_counts[:, None]
    g_cnt = graph.graph_counts[:, None]
    rsum = rows.indicator @ v
    cm = (cols.indicator @ v) / c_cnt
    rm = rsum / r_cnt
    gm = (graph.graph_of_rows.indicator @ rsum) / g_cnt
    cz = cm @ Wc.value
    rz = rm @ Wr.value + np.take(gm @ Wg.value + bias.value, graph.present_row_graph, axis=0)
    pre = v @ Wo.value
    pre += np.take(cz, cols.index, axis=0)
    pre += np.repeat(rz, graph.row_counts, axis=0)
    out = np.maximum(pre, 0.0, out=pre)

    def backward(g):
        gp = g * (out > 0)
        gcz = cols.indicator @ gp
        grz = rows.indicator @ gp
        ggz = graph.graph_of_rows.indicator @ grz
        row_back = (grz @ Wr.value.T) / r_cnt
        row_back += np.take((ggz @ Wg.value.T) / g_cnt, graph.present_row_graph, axis=0)
        gv = gp @ Wo.value.T
        gv += np.take((gcz @ Wc.value.T) / c_cnt, cols.index, axis=0)
        gv += np.repeat(row_back, graph.row_counts, axis=0)
        return (gv, cm.T @ gcz, rm.T @ grz, gm.T @ ggz, v.T @ gp, ggz.sum(axis=0))

    return gk.record(out, "gnn_layer", (V, Wc, Wr, Wg, Wo, bias), backward)


def forward_logits(tensors: dict, graph: GraphView, K: int) -> gk.Tensor:
    """Logit per row of the stacked matrices; all-abstain rows get logit 0.

    The affine map over the concatenated [column, row, global, self] features
    is applied block by block: concat(a, b, c, e) @ F equals
    a @ F[:d] + b @ F[d:2d] + c @ F[2d:3d] + e @ F[3d:], so each pooled
    feature goes through the single d x d product W_i @ F_i.
    """
    d = tensors["embed"].value.shape[1]
    V = gk.take_rows(tensors["embed"], graph.embed_index)
    for k in range(K):
        F = tensors[f"layer{k}.f_weight"]
        merged = [
            gk.matmul(tensors[f"layer{k}.W{i + 1}"], gk.slice_rows(F, i * d, (i + 1) * d))
            for i in range(4)
        ]
        try:
            V = _layer(V, graph, *merged, tensors[f"layer{k}.f_bias"])
        except NonFiniteError as exc:
            raise NonFiniteError(f"GNN layer {k}: {exc}") from None
    try:
        h = gk.group_mean(V, graph.row_groups)
        h = gk.relu(_affine(h, tensors["head0.weight"], tensors["head0.bias"]))
        h = gk.relu(_affine(h, tensors["head1.weight"], tensors["head1.bias"]))
        z = _affine(h, tensors["head2.weight"], tensors["head2.bias"])
    except NonFiniteError as exc:
        raise NonFiniteError(f"MLP head: {exc}") from None
    return gk.scatter_rows(z, graph.present_rows, graph.num_rows)


def reference_forward(params: ModelParams, X) -> np.ndarray:
    """Direct dense evaluation of the layer equations, one node at a time.

    Slow; exists to cross-check :func:`forward`.
    """
    X = as_binary(X)
    n, m = X.shape
    present = X != 0
    if not present.any():
        raise ContractViolation("empty label matrix: every entry abstains")
    A = params.arrays
    V = np.zeros((n, m, params.d))
    V[X == 1] = A["embed"][0]
    V[X == -1] = A["embed"][1]
    for k in range(params.K):
        new = np.zeros_like(V)
        glob = V[present].mean(axis=0)
        for i, j in zip(*np.nonzero(present)):
            col = V[present[:, j], j].mean(axis=0)
            row = V[i, present[i]].mean(axis=0)
            feats = np.concatenate([
                col @ A[f"layer{k}.W1"], row @ A[f"layer{k}.W2"],
                glob @ A[f"layer{k}.W3"], V[i, j] @ A[f"layer{k}.W4"],
            ])
            new[i, j] = np.maximum(feats @ A[f"layer{k}.f_weight"] + A[f"layer{k}.f_bias"], 0.0)
        V = new
    probs = np.full(n, 0.5)
    for i in range(n):
        if not present[i].any():
            continue
        h = V[i, present[i]].mean(axis=0)
        h = np.maximum(h @ A["head0.weight"] + A["head0.bias"], 0.0)
        h = np.maximum(h @ A["head1.weight"] + A["head1.bias"], 0.0)
        z = (h @ A["head2.weight"] + A["head2.bias"])[0]
        probs[i] = 1.0 / (1.0 + np.exp(-z))
    return probs


def _constants(params: ModelParams):
    return {k: gk.constant(v) for k, v in params.arrays.items()}


def forward_graph(params: ModelParams, graph: GraphView) -> np.ndarray:
    z = forward_logits(_constants(params), graph, params.K).value[:, 0]
    return gk._sigmoid(z)


def forward(params: ModelParams, X) -> np.ndarray:
    """Probability of class +1 for every row of ``X``."""
    return forward_graph(params, encode(X))


def forward_many(params: ModelParams, matrices) -> list:
    """Forward several matrices in one stacked pass; returns one vector each."""
    graph = GraphView(matrices)
    probs = forward_graph(params, graph)
    return [probs[off:off + shape[0]] for off, shape in zip(graph.row_offsets, graph.shapes)]


# ---------------------------------------------------------------------------
# persistence


def params_to_json(params: ModelParams) -> str:
    doc = {
        "version": params.version,
        "K": params.K,
        "d": params.d,
        "arrays": {name: params.arrays[name].tolist() for name in param_shapes(params.K, params.d)},
    }
    # json writes floats with repr, the shortest string that round-trips
    return json.dumps(doc, separators=(",", ":"))


def params_from_json(text: str) -> ModelParams:
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CorruptModelError(f"model file is not valid JSON: {exc}") from None
    if not isinstance(doc, dict) or not {"version", "K", "d", "arrays"} <= doc.keys():
        raise CorruptModelError("model file lacks version/K/d/arrays")
    if doc["version"] != FORMAT_VERSION:
        raise ModelVersionError(f"model format version {doc['version']!r}, expected {FORMAT_VERSION}")
    K, d = doc["K"], doc["d"]
    if not (isinstance(K, int) and isinstance(d, int) and K >= 1 and d >= 1):
        raise CorruptModelError(f"bad K/d: {K!r}/{d!r}")
    shapes = param_shapes(K, d)
    arrays = {}
    if set(doc["arrays"]) != set(shapes):
        missing = sorted(set(shapes) - set(doc["arrays"]))
        extra = sorted(set(doc["arrays"]) - set(shapes))
        raise ModelShapeError(f"array names do not match K={K}, d={d}: missing {missing}, unexpected {extra}")
    for name, shape in shapes.items():
        try:
            arr = np.array(doc["arrays"][name], dtype=np.float64)
        except (TypeError, ValueError):
            raise CorruptModelError(f"array {name} is not numeric") from None
        if arr.shape != shape:
            raise ModelShapeError(f"array {name} has shape {arr.shape}, expected {shape}")
        if not np.all(np.isfinite(arr)):
            raise CorruptModelError(f"array {name} has non-finite values")
        arrays[name] = arr
    return ModelParams(K, d, arrays, FORMAT_VERSION)


def save_params(path, params: ModelParams):
    tmp = f"{path}.tmp-{os.getpid()}"
    with open(tmp, "w", encoding="utf-8") as fh:
        fh.write(params_to_json(params))
        fh.write("\n")
    os.replace(tmp, path)


def load_params(path) -> ModelParams:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except UnicodeDecodeError:
        raise CorruptModelError(f"{path}: not UTF-8 text") from None
    return params_from_json(text)
