"""Binary checkpoints for the three network kinds.

All integers and floats are little-endian. Every file starts with a 4-byte
magic and ends with a UTF-8 ``key=value`` echo of the run configuration.
SPELA embedding sets are stored by key and rebuilt on load, which is exact
because generation is deterministic given (kind, n, dim, seed, tolerance).
"""

from __future__ import annotations

import io
import struct

import numpy as np

from .cnn import ConvBlock, ConvSpec, GroupAssignment, SpelaCNN
from .bp import BpNetwork
from .embeddings import Provenance, make_embeddings
from .losses import LossKind
from .mlp import DenseLayer, SpelaNetwork

MAGIC_SPELA = b"SPNW"
MAGIC_BP = b"BPNW"
MAGIC_CNN = b"SPCN"
VERSION = 1

_LOSS_TAGS = list(LossKind)
_PROV_TAGS = list(Provenance)
ACT_LEAKY = 1


class CheckpointError(ValueError):
    pass


class _Writer:
    def __init__(self):
        self.buf = io.BytesIO()

    def pack(self, fmt: str, *vals) -> None:
        self.buf.write(struct.pack("<" + fmt, *vals))

    def array(self, a: np.ndarray, dtype="<f8") -> None:
        self.buf.write(np.ascontiguousarray(a, dtype=dtype).tobytes())

    def text(self, s: str) -> None:
        raw = s.encode("utf-8")
        self.pack("I", len(raw))
        self.buf.write(raw)


class _Reader:
    def __init__(self, raw: bytes):
        self.raw = raw
        self.pos = 0

    def unpack(self, fmt: str):
        fmt = "<" + fmt
        n = struct.calcsize(fmt)
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        vals = struct.unpack_from(fmt, self.raw, self.pos)
        self.pos += n
        return vals if len(vals) > 1 else vals[0]

    def array(self, shape, dtype="<f8") -> np.ndarray:
        n = int(np.prod(shape)) * np.dtype(dtype).itemsize
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        a = np.frombuffer(self.raw, dtype=dtype, count=int(np.prod(shape)), offset=self.pos)
        self.pos += n
        return a.astype(np.float64 if dtype == "<f8" else np.int64).reshape(shape)

    def text(self) -> str:
        n = self.unpack("I")
        if self.pos + n > len(self.raw):
            raise CheckpointError("truncated checkpoint")
        s = self.raw[self.pos:self.pos + n].decode("utf-8")
        self.pos += n
        return s


def config_echo(cfg: dict) -> str:
    return "".join(f"{k}={v}\n" for k, v in cfg.items())


def parse_echo(text: str) -> dict:
    out = {}
    for line in text.splitlines():
        if "=" in line:
            k, v = line.split("=", 1)
            out[k] = v
    return out


def _header(w: _Writer, magic: bytes) -> None:
    w.buf.write(magic)
    w.pack("I", VERSION)


def _check_header(r: _Reader, magic: bytes) -> None:
    got = r.raw[:4]
    if got != magic:
        raise CheckpointError(f"bad magic {got!r}, expected {magic!r}")
    r.pos = 4
    if r.unpack("I") != VERSION:
        raise CheckpointError("unsupported checkpoint version")


def _embedding_key(w: _Writer, key: tuple) -> None:
    prov, n, dim, seed, tol = key
    w.pack("BIIQd", _PROV_TAGS.index(Provenance(prov)), n, dim, seed, tol)


def _read_key(r: _Reader) -> tuple:
    tag, n, dim, seed, tol = r.unpack("BIIQd")
    return _PROV_TAGS[tag], n, dim, seed, tol


def save_spela(path, net: SpelaNetwork, cfg: dict | None = None) -> None:
    w = _Writer()
    _header(w, MAGIC_SPELA)
    w.pack("IB", len(net.layers), _LOSS_TAGS.index(net.loss_kind))
    for l in net.layers:
        w.pack("IIBdBB", l.n_in, l.n_out, ACT_LEAKY, l.slope, int(l.use_bias), int(l.binarize))
        w.pack("d", l.dropout)
        w.array(l.W)
        w.array(l.b)
        _embedding_key(w, l.embeddings.key)
    w.text(config_echo(cfg or {}))
    with open(path, "wb") as f:
        f.write(w.buf.getvalue())


def load_spela(path, cache_dir=None) -> tuple:
    """Returns (network, config echo dict)."""
    with open(path, "rb") as f:
        r = _Reader(f.read())
    _check_header(r, MAGIC_SPELA)
    n_layers, loss_tag = r.unpack("IB")
    layers = []
    for k in range(n_layers):
        n_in, n_out, act, slope, use_bias, binarize = r.unpack("IIBdBB")
        if act != ACT_LEAKY:
            raise CheckpointError(f"unknown activation tag {act}")
        dropout = r.unpack("d")
        W = r.array((n_out, n_in))
        b = r.array((n_out,))
        prov, n, dim, seed, tol = _read_key(r)
        e = make_embeddings(n, dim, prov, seed, tol, cache_dir)
        layers.append(DenseLayer(W, b, e, slope, dropout, bool(binarize), bool(use_bias), index=k))
    cfg = parse_echo(r.text())
    net = SpelaNetwork(layers, _LOSS_TAGS[loss_tag])
    net.check()
    return net, cfg


def save_bp(path, net: BpNetwork, cfg: dict | None = None) -> None:
    w = _Writer()
    _header(w, MAGIC_BP)
    w.pack("IdBBBd", len(net.weights), net.slope, int(net.binarize), int(net.normalize_inputs),
           int(net.use_bias), net.dropout)
    for W, b in zip(net.weights, net.biases):
        w.pack("II", W.shape[1], W.shape[0])
        w.array(W)
        w.array(b)
    w.text(config_echo(cfg or {}))
    with open(path, "wb") as f:
        f.write(w.buf.getvalue())


def load_bp(path) -> tuple:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    _check_header(r, MAGIC_BP)
    n_layers, slope, binarize, norm, use_bias, dropout = r.unpack("IdBBBd")
    Ws, bs = [], []
    for _ in range(n_layers):
        n_in, n_out = r.unpack("II")
        Ws.append(r.array((n_out, n_in)))
        bs.append(r.array((n_out,)))
    cfg = parse_echo(r.text())
    return BpNetwork(Ws, bs, slope, dropout, bool(binarize), bool(norm), bool(use_bias)), cfg


def save_cnn(path, net: SpelaCNN, cfg: dict | None = None, embedding_seed: int = 0,
             embedding_tol: float = 1e-9) -> None:
    w = _Writer()
    _header(w, MAGIC_CNN)
    w.pack("IIQd", len(net.blocks), net.n_classes, embedding_seed, embedding_tol)
    for blk in net.blocks:
        s = blk.spec
        d = blk.head_W.shape[1]
        w.pack("IIIIIII", s.in_channels, s.out_channels, s.kernel_size, s.stride, s.padding,
               *blk.in_hw)
        w.pack("IdBB", d, blk.head_slope, _LOSS_TAGS.index(blk.loss_kind), int(blk.pool))
        w.pack("dd", blk.lr_kernel, blk.lr_head)
        for arr in (blk.K, blk.b, blk.a, blk.head_W, blk.head_b):
            w.array(arr)
        w.array(blk.group_of, "<u1")
        w.array([a.n_groups for a in blk.assignments], "<u1")
    w.text(config_echo(cfg or {}))
    with open(path, "wb") as f:
        f.write(w.buf.getvalue())


def load_cnn(path, cache_dir=None) -> tuple:
    with open(path, "rb") as f:
        r = _Reader(f.read())
    _check_header(r, MAGIC_CNN)
    n_blocks, n_classes, e_seed, e_tol = r.unpack("IIQd")
    blocks = []
    for _ in range(n_blocks):
        cin, cout, k, s, p, h, wd = r.unpack("IIIIIII")
        d, slope, loss_tag, pool = r.unpack("IdBB")
        lr_k, lr_h = r.unpack("dd")
        spec = ConvSpec(cin, cout, k, s, p)
        oh, ow = spec.out_hw(h, wd)
        K = r.array((cout, cin, k, k))
        b = r.array((cout,))
        a = r.array((cout,))
        hW = r.array((cout, d, oh * ow))
        hb = r.array((cout, d))
        group_of = r.array((cout, n_classes), "<u1")
        ms = r.array((cout,), "<u1")
        asg = [GroupAssignment(j, tuple(tuple(int(c) for c in np.flatnonzero(group_of[j] == g))
                                        for g in range(ms[j])))
               for j in range(cout)]
        E = [make_embeddings(int(m), d, "symmetric", e_seed, e_tol, cache_dir).vectors for m in ms]
        blocks.append(ConvBlock(spec, (h, wd), K, b, a, hW, hb, E, asg, n_classes, slope,
                                _LOSS_TAGS[loss_tag], bool(pool), lr_k, lr_h))
    cfg = parse_echo(r.text())
    return SpelaCNN(blocks, n_classes), cfg


def load_any(path, cache_dir=None) -> tuple:
    """Dispatch on the magic; returns (kind, network, config echo)."""
    with open(path, "rb") as f:
        magic = f.read(4)
    if magic == MAGIC_SPELA:
        return ("spela",) + load_spela(path, cache_dir)
    if magic == MAGIC_BP:
        return ("bp",) + load_bp(path)
    if magic == MAGIC_CNN:
        return ("cnn",) + load_cnn(path, cache_dir)
    raise CheckpointError(f"unknown checkpoint magic {magic!r}")
