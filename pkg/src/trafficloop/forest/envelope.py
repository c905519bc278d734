"""Binary model envelope (little-endian, canonical).

    magic "POSM" | format u16 = 1 | kind u8 (0 tree, 1 forest) | model_version u32
    | n_trees u32 | per tree: n_nodes u32, n_nodes x 30-byte node records

    node: flag u8 (0 internal, 1 leaf) | feature u8 | threshold f64
          | left u32 | right u32 | counts 3 x u32

Internal nodes zero their counts; leaves zero feature/threshold/left/right.
"""

from __future__ import annotations

import math
import struct

from ..errors import BadMagic, CorruptNodeTable, UnsupportedFormatVersion
from .tree import N_FEATURES, DecisionTree, Model, RandomForest, TreeNode

MAGIC = b"POSM"
FORMAT_VERSION = 1
KIND_TREE = 0
KIND_FOREST = 1

_HEADER = struct.Struct("<4sHBII")
_COUNT = struct.Struct("<I")
_NODE = struct.Struct("<BBdIIIII")
assert _NODE.size == 30


def serialize_model(model: Model, model_version: int) -> bytes:
    if isinstance(model, RandomForest):
        kind, trees = KIND_FOREST, model.trees
    elif isinstance(model, DecisionTree):
        kind, trees = KIND_TREE, (model,)
    else:
        raise TypeError(f"cannot serialize {type(model).__name__}")
    parts = [_HEADER.pack(MAGIC, FORMAT_VERSION, kind, model_version, len(trees))]
    for tree in trees:
        parts.append(_COUNT.pack(len(tree.nodes)))
        for n in tree.nodes:
            if n.is_leaf:
                parts.append(_NODE.pack(1, 0, 0.0, 0, 0, *n.counts))
            else:
                parts.append(_NODE.pack(0, n.feature, n.threshold, n.left, n.right, 0, 0, 0))
    return b"".join(parts)


def _read_tree(buf: bytes, off: int) -> tuple[DecisionTree, int]:
    if off + 4 > len(buf):
        raise CorruptNodeTable("truncated before node count")
    (n_nodes,) = _COUNT.unpack_from(buf, off)
    off += 4
    if n_nodes == 0:
        raise CorruptNodeTable("tree with zero nodes")
    if off + n_nodes * _NODE.size > len(buf):
        raise CorruptNodeTable(f"truncated node table ({n_nodes} nodes declared)")
    nodes = []
    for i in range(n_nodes):
        flag, feature, thr, left, right, c0, c1, c2 = _NODE.unpack_from(buf, off)
        off += _NODE.size
        if flag == 1:
            if feature or thr != 0.0 or left or right or math.copysign(1.0, thr) < 0:
                raise CorruptNodeTable(f"leaf {i} has non-zero split fields")
            if c0 + c1 + c2 == 0:
                raise CorruptNodeTable(f"leaf {i} has no samples")
            nodes.append(TreeNode(True, 0, 0.0, 0, 0, (c0, c1, c2)))
        elif flag == 0:
            if feature >= N_FEATURES or not math.isfinite(thr):
                raise CorruptNodeTable(f"internal node {i} has an invalid split")
            if not (i < left < n_nodes and i < right < n_nodes) or left == right:
                raise CorruptNodeTable(f"internal node {i} has child index out of range")
            if c0 or c1 or c2:
                raise CorruptNodeTable(f"internal node {i} has non-zero counts")
            nodes.append(TreeNode(False, feature, thr, left, right, (0, 0, 0)))
        else:
            raise CorruptNodeTable(f"node {i} has flag {flag}")
    # every node must have exactly one parent (root none)
    parents = [0] * n_nodes
    for n in nodes:
        if not n.is_leaf:
            parents[n.left] += 1
            parents[n.right] += 1
    if parents[0] != 0 or any(p != 1 for p in parents[1:]):
        raise CorruptNodeTable("node table is not a tree rooted at node 0")
    return DecisionTree(nodes), off


def deserialize_model(buf: bytes) -> tuple[Model, int]:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise BadMagic(f"envelope magic {bytes(buf[:4])!r} != {MAGIC!r}")
    if len(buf) < _HEADER.size:
        raise CorruptNodeTable("truncated envelope header")
    _, fmt, kind, version, n_trees = _HEADER.unpack_from(buf)
    if fmt != FORMAT_VERSION:
        raise UnsupportedFormatVersion(f"envelope format {fmt}")
    if kind not in (KIND_TREE, KIND_FOREST):
        raise CorruptNodeTable(f"unknown model kind {kind}")
    if n_trees == 0 or (kind == KIND_TREE and n_trees != 1):
        raise CorruptNodeTable(f"model kind {kind} with {n_trees} trees")
    off = _HEADER.size
    trees = []
    for _ in range(n_trees):
        tree, off = _read_tree(buf, off)
        trees.append(tree)
    if off != len(buf):
        raise CorruptNodeTable(f"{len(buf) - off} trailing bytes after node tables")
    model = trees[0] if kind == KIND_TREE else RandomForest(trees)
    return model, version


def save_model(path, model: Model, version: int) -> None:
    with open(path, "wb") as fh:
        fh.write(serialize_model(model, version))


def load_model(path) -> tuple[Model, int]:
    with open(path, "rb") as fh:
        return deserialize_model(fh.read())
