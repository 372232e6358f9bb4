"""Versioned binary model files.

Layout (all integers little-endian uint32 unless noted):

    magic  b"PGM1"
    header length, header JSON
        {"version", "dtype", "seed", "inputs", "outputs"}
    node count
    per node: record length, then uint8 kind id + record JSON
        {"name", "inputs", "options", "param_shapes"}
    parameters as little-endian float32, declaration order
    batch-norm running stats (mean then var) per node, node order

Parameters are stored as float32, so the round trip is bit-exact for
float32 graphs; wider graphs are narrowed on save.
"""
from __future__ import annotations

import json
import struct

import numpy as np

from .graph import LayerSpec, ModelGraph
from .layers import KIND_IDS, LAYER_OPS

MAGIC = b"PGM1"
FORMAT_VERSION = 1

_ID_KINDS = {v: k for k, v in KIND_IDS.items()}


def save_model(graph: ModelGraph, path) -> None:
    header = {
        "version": FORMAT_VERSION,
        "dtype": graph.dtype.name,
        "seed": graph.seed,
        "inputs": {k: list(v) for k, v in graph.input_shapes.items()},
        "outputs": list(graph.output_names),
    }
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        blob = json.dumps(header, sort_keys=True).encode()
        fh.write(struct.pack("<I", len(blob)))
        fh.write(blob)
        fh.write(struct.pack("<I", len(graph.nodes)))
        for node in graph.nodes:
            op = LAYER_OPS[node.kind]
            record = {
                "name": node.name,
                "inputs": list(node.inputs),
                "options": node.options,
                "param_shapes": {
                    p: list(graph.params[f"{node.name}.{p}"].shape)
                    for p in op.param_names
                },
            }
            blob = json.dumps(record, sort_keys=True).encode()
            fh.write(struct.pack("<I", 1 + len(blob)))
            fh.write(struct.pack("<B", KIND_IDS[node.kind]))
            fh.write(blob)
        fh.write(graph.param_bytes())
        for node in graph.nodes:
            if node.kind == "batchnorm":
                stats = graph.running[node.name]
                fh.write(np.ascontiguousarray(stats["mean"], dtype="<f4").tobytes())
                fh.write(np.ascontiguousarray(stats["var"], dtype="<f4").tobytes())


def load_model(path) -> ModelGraph:
    with open(path, "rb") as fh:
        if fh.read(4) != MAGIC:
            raise ValueError(f"{path}: not a model file (bad magic)")
        (hlen,) = struct.unpack("<I", fh.read(4))
        header = json.loads(fh.read(hlen))
        if header["version"] != FORMAT_VERSION:
            raise ValueError(f"{path}: unsupported format version {header['version']}")
        (n_nodes,) = struct.unpack("<I", fh.read(4))
        nodes, shapes = [], []
        for _ in range(n_nodes):
            (rlen,) = struct.unpack("<I", fh.read(4))
            raw = fh.read(rlen)
            kind = _ID_KINDS[raw[0]]
            record = json.loads(raw[1:])
            nodes.append(LayerSpec(kind=kind, name=record["name"],
                                   inputs=tuple(record["inputs"]),
                                   options=record["options"]))
            shapes.append(record["param_shapes"])

        graph = ModelGraph(
            nodes,
            input_shapes={k: tuple(v) for k, v in header["inputs"].items()},
            output_names=header["outputs"],
            dtype=np.dtype(header["dtype"]),
            seed=header["seed"],
        )
        for node, pshapes in zip(graph.nodes, shapes):
            for pname in LAYER_OPS[node.kind].param_names:
                want = tuple(pshapes[pname])
                have = graph.params[f"{node.name}.{pname}"].shape
                if want != have:
                    raise ValueError(f"{path}: stored shape {want} for "
                                     f"{node.name}.{pname} does not match {have}")
        for node in graph.nodes:
            for pname in LAYER_OPS[node.kind].param_names:
                key = f"{node.name}.{pname}"
                n = graph.params[key].size
                data = np.frombuffer(fh.read(4 * n), dtype="<f4").reshape(
                    graph.params[key].shape)
                graph.params[key] = data.astype(graph.dtype)
        for node in graph.nodes:
            if node.kind == "batchnorm":
                c = graph.shapes[node.name][0]
                for stat in ("mean", "var"):
                    data = np.frombuffer(fh.read(4 * c), dtype="<f4")
                    graph.running[node.name][stat] = data.astype(graph.dtype)
        trailing = fh.read(1)
        if trailing:
            raise ValueError(f"{path}: trailing bytes after model payload")
    return graph
