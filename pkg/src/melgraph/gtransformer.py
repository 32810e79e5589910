"""Graph-embedding Transformer for log-Mel spectrograms.

Layout (default configuration):

    (B, 512, 128) spectrogram
      -> stem: five 3x3 convs, channels 12/24/48/96/96, strides 2/2/2/2/1,
         each followed by batch norm + ReLU               -> (B, 96, 32, 8)
      -> + learnable (32, 8) positional grid, broadcast over channels
      -> nodes, time-major n = t * 8 + f                   -> (B, 256, 96)
      -> L blocks of: pre-LN encoder layer (MHSA + GELU MLP)
                      grapher (1x1 in + ReLU, KNN graph, max-relative conv,
                               1x1 out, residual)
                      FFN (ReLU, hidden 4 * dim, residual)
      -> back to (B, 96, 32, 8) -> average pool -> 1x1 conv 96->512 -> BN
         -> ReLU -> 1x1 conv 512->C                         -> (B, C)

The 1x1 convolutions on node features are implemented as matrix products,
which is the same map.  KNN graphs are rebuilt in every block from the
current grapher features.
"""

import json
import math
import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad


def default_k_schedule(depth, k_min=2, k_max=8):
    """K_l = floor(k_min + (k_max - k_min) * (l - 1) / (L - 1)), l = 1..L."""
    if depth == 1:
        return [k_min]
    return [k_min + ((k_max - k_min) * (l - 1)) // (depth - 1) for l in range(1, depth + 1)]


@dataclass
class ModelConfig:
    n_classes: int = 5
    dim: int = 96
    depth: int = 8
    heads: int = 8
    k_schedule: list = None
    stem_channels: list = field(default_factory=lambda: [12, 24, 48, 96, 96])
    stem_strides: list = field(default_factory=lambda: [2, 2, 2, 2, 1])
    mlp_ratio: int = 4
    ffn_ratio: int = 4
    head_hidden: int = 512
    input_shape: tuple = (512, 128)
    use_encoder: bool = True
    use_gnn: bool = True
    use_ffn: bool = True
    use_pe: bool = True

    def __post_init__(self):
        if self.k_schedule is None:
            self.k_schedule = default_k_schedule(self.depth)
        self.k_schedule = [int(k) for k in self.k_schedule]
        self.stem_channels = [int(c) for c in self.stem_channels]
        self.stem_strides = [int(s) for s in self.stem_strides]
        self.input_shape = tuple(int(s) for s in self.input_shape)
        self.validate()

    @classmethod
    def scaled(cls, dim=32, depth=2, heads=4, k_schedule=None, head_hidden=128, **kw):
        """Smaller model with the same topology; stem widths follow dim/8, dim/4, dim/2, dim, dim."""
        stem = [max(1, dim // 8), max(1, dim // 4), max(1, dim // 2), dim, dim]
        return cls(dim=dim, depth=depth, heads=heads, k_schedule=k_schedule,
                   stem_channels=stem, head_hidden=head_hidden, **kw)

    @property
    def grid(self):
        down = int(np.prod(self.stem_strides))
        return self.input_shape[0] // down, self.input_shape[1] // down

    @property
    def n_nodes(self):
        t, f = self.grid
        return t * f

    @property
    def head_dim(self):
        return self.dim // self.heads

    def validate(self):
        if self.dim % self.heads:
            raise ValueError(f"dim={self.dim} not divisible by heads={self.heads}")
        if len(self.k_schedule) != self.depth:
            raise ValueError("k_schedule length must equal depth")
        if any(not 1 <= k < self.n_nodes for k in self.k_schedule):
            raise ValueError(f"every K must lie in [1, {self.n_nodes})")
        if len(self.stem_channels) != len(self.stem_strides):
            raise ValueError("stem_channels and stem_strides differ in length")
        if self.stem_channels[-1] != self.dim:
            raise ValueError("last stem channel count must equal dim")

    def to_dict(self):
        d = asdict(self)
        d["input_shape"] = list(self.input_shape)
        return d

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def param_count_formula(cfg):
    """Trainable parameter count in closed form.

    stem:   sum_i 9 * c_{i-1} * c_i (bias-free convs) + 2 * c_i (BN scale/shift)
    PE:     T' * F'
    block:  encoder  2 * 2D (two LNs) + 4 * D^2 + 3 * D (q, k, v, out; no key bias) + 2 * r*D^2 + r*D + D (MLP)
            grapher  (D^2 + D) (in) + (2D * D + D) (update) + (D^2 + D) (out)
            FFN      2 * f*D^2 + f*D + D
    head:   D * hidden (bias-free) + 2 * hidden (BN) + hidden * C + C
    """
    D = cfg.dim
    n = 0
    c_prev = 1
    for c in cfg.stem_channels:
        n += 9 * c_prev * c + 2 * c
        c_prev = c
    if cfg.use_pe:
        n += cfg.n_nodes
    enc = 4 * D + 4 * D * D + 3 * D + 2 * cfg.mlp_ratio * D * D + cfg.mlp_ratio * D + D
    gnn = (D * D + D) + (2 * D * D + D) + (D * D + D)
    ffn = 2 * cfg.ffn_ratio * D * D + cfg.ffn_ratio * D + D
    per_block = enc * cfg.use_encoder + gnn * cfg.use_gnn + ffn * cfg.use_ffn
    n += cfg.depth * per_block
    n += D * cfg.head_hidden + 2 * cfg.head_hidden + cfg.head_hidden * cfg.n_classes + cfg.n_classes
    return n


@dataclass
class MelGraph:
    node_features: np.ndarray   # (N, D)
    neighbor_idx: np.ndarray    # (N, K); edges point from neighbour j to centre i
    K: int

    def edges(self):
        return [(int(j), i) for i in range(self.neighbor_idx.shape[0]) for j in self.neighbor_idx[i]]


def knn_indices(x, k):
    """K nearest neighbours (Euclidean, self excluded, ties -> smaller index).

    x: (N, D) or (B, N, D).  Distances are formed in float64 with a
    non-BLAS einsum so every pair is reduced in the same order; identical
    rows therefore tie exactly.
    """
    x = np.asarray(x, dtype=np.float64)
    squeeze = x.ndim == 2
    if squeeze:
        x = x[None]
    n = x.shape[1]
    if not 1 <= k <= n - 1:
        raise ValueError(f"K={k} out of range [1, {n - 1}]")
    sq = np.einsum("bnd,bnd->bn", x, x)
    gram = np.einsum("bnd,bmd->bnm", x, x)
    dist = sq[:, :, None] + sq[:, None, :] - 2.0 * gram
    dist = np.maximum(dist, 0.0)
    idx = np.arange(n)
    dist[:, idx, idx] = np.inf
    # select exactly k per row: everything below the k-th smallest distance,
    # then the lowest-index entries equal to it
    kth = np.partition(dist, k - 1, axis=-1)[..., k - 1:k]
    below = dist < kth
    tied = dist == kth
    room = k - below.sum(axis=-1, keepdims=True)
    chosen = below | (tied & (np.cumsum(tied, axis=-1) <= room))
    sel = np.nonzero(chosen)[-1].reshape(dist.shape[:-1] + (k,))
    # nearest first; stable sort keeps index order among equal distances
    order = np.argsort(np.take_along_axis(dist, sel, axis=-1), axis=-1, kind="stable")
    out = np.take_along_axis(sel, order, axis=-1)
    return out[0] if squeeze else out


def knn_graph(x, k, p=2):
    if p != 2:
        raise ValueError("only the Euclidean (p=2) metric is supported")
    x = np.asarray(x)
    return MelGraph(x, knn_indices(x, k), k)


# ------------------------------------------------------------------ parameters

def _kaiming_uniform(rng, fan_in, shape):
    bound = math.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape)


def _fan_in_uniform(rng, fan_in, shape):
    bound = 1.0 / math.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(cfg, seed=0, dtype=np.float32):
    """Named trainable parameters and batch-norm running buffers.

    Kaiming-uniform for layers feeding a ReLU/GELU, N(0, 0.02) for attention
    projections and the positional grid, U(+-1/sqrt(fan_in)) for the other
    projections, zeros for biases/shifts, ones for scales.
    """
    rng = np.random.default_rng(seed)
    P = OrderedDict()
    buffers = OrderedDict()
    D = cfg.dim

    def put(name, arr):
        P[name] = ad.Tensor(np.asarray(arr, dtype=dtype), requires_grad=True, name=name)

    def bn(prefix, c):
        put(f"{prefix}.gamma", np.ones(c))
        put(f"{prefix}.beta", np.zeros(c))
        buffers[f"{prefix}.running_mean"] = np.zeros(c, dtype=dtype)
        buffers[f"{prefix}.running_var"] = np.ones(c, dtype=dtype)

    c_prev = 1
    for i, c in enumerate(cfg.stem_channels, start=1):
        put(f"stem{i}.conv.weight", _kaiming_uniform(rng, 9 * c_prev, (c, c_prev, 3, 3)))
        bn(f"stem{i}.bn", c)
        c_prev = c
    if cfg.use_pe:
        put("pos_embed", rng.normal(0.0, 0.02, cfg.grid))

    hid = cfg.mlp_ratio * D
    ffh = cfg.ffn_ratio * D
    for l in range(1, cfg.depth + 1):
        b = f"block{l}"
        if cfg.use_encoder:
            put(f"{b}.enc.ln1.gamma", np.ones(D))
            put(f"{b}.enc.ln1.beta", np.zeros(D))
            for proj in ("q", "k", "v", "o"):
                put(f"{b}.enc.attn.w_{proj}", rng.normal(0.0, 0.02, (D, D)))
                if proj != "k":  # a key bias shifts each score row uniformly; softmax cancels it
                    put(f"{b}.enc.attn.b_{proj}", np.zeros(D))
            put(f"{b}.enc.ln2.gamma", np.ones(D))
            put(f"{b}.enc.ln2.beta", np.zeros(D))
            put(f"{b}.enc.mlp.w_1", _kaiming_uniform(rng, D, (D, hid)))
            put(f"{b}.enc.mlp.b_1", np.zeros(hid))
            put(f"{b}.enc.mlp.w_2", _fan_in_uniform(rng, hid, (hid, D)))
            put(f"{b}.enc.mlp.b_2", np.zeros(D))
        if cfg.use_gnn:
            put(f"{b}.gnn.w_in", _kaiming_uniform(rng, D, (D, D)))
            put(f"{b}.gnn.b_in", np.zeros(D))
            put(f"{b}.gnn.w_update", _fan_in_uniform(rng, 2 * D, (2 * D, D)))
            put(f"{b}.gnn.b_update", np.zeros(D))
            put(f"{b}.gnn.w_out", _fan_in_uniform(rng, D, (D, D)))
            put(f"{b}.gnn.b_out", np.zeros(D))
        if cfg.use_ffn:
            put(f"{b}.ffn.w_1", _kaiming_uniform(rng, D, (D, ffh)))
            put(f"{b}.ffn.b_1", np.zeros(ffh))
            put(f"{b}.ffn.w_2", _fan_in_uniform(rng, ffh, (ffh, D)))
            put(f"{b}.ffn.b_2", np.zeros(D))

    put("head.conv1.weight", _kaiming_uniform(rng, D, (D, cfg.head_hidden)))
    bn("head.bn", cfg.head_hidden)
    put("head.conv2.weight", _fan_in_uniform(rng, cfg.head_hidden, (cfg.head_hidden, cfg.n_classes)))
    put("head.conv2.bias", np.zeros(cfg.n_classes))
    return P, buffers


# ------------------------------------------------------------------ the model

class GTransformer:
    """Parameters plus the forward pass.

    ``forward`` accepts an optional ``capture`` dict which is filled with
    intermediate shapes, post-softmax attention maps (``attn{l}``, shape
    (B, H, N, N)) and neighbour indices (``graph{l}``, shape (B, N, K)).
    Passing ``graphs`` (a dict block -> (B, N, K) indices) reuses fixed
    neighbour lists instead of recomputing KNN.
    """

    def __init__(self, cfg, seed=0, dtype=np.float32):
        self.cfg = cfg
        self.params, self.buffers = init_params(cfg, seed, dtype)

    # parameter management -------------------------------------------------
    def parameters(self):
        return list(self.params.values())

    def named_parameters(self):
        return list(self.params.items())

    def zero_grad(self):
        for p in self.params.values():
            p.grad = None

    def num_parameters(self):
        return sum(p.size for p in self.params.values())

    def astype(self, dtype):
        for p in self.params.values():
            p.data = p.data.astype(dtype)
        for k in self.buffers:
            self.buffers[k] = self.buffers[k].astype(dtype)
        return self

    def state_dict(self):
        return OrderedDict((k, v.data.copy()) for k, v in self.params.items()), \
            OrderedDict((k, v.copy()) for k, v in self.buffers.items())

    def load_state(self, params, buffers):
        for k, v in params.items():
            if k not in self.params or self.params[k].shape != v.shape:
                raise ValueError(f"parameter mismatch for {k}")
            self.params[k].data = np.array(v, copy=True)
        for k, v in buffers.items():
            if k not in self.buffers:
                raise ValueError(f"unknown buffer {k}")
            self.buffers[k] = np.array(v, copy=True)

    # building blocks --------------------------------------------------------
    def _p(self, name):
        return self.params[name]

    def _bn(self, x, prefix, training):
        return ad.batchnorm(x, self._p(f"{prefix}.gamma"), self._p(f"{prefix}.beta"),
                            self.buffers[f"{prefix}.running_mean"],
                            self.buffers[f"{prefix}.running_var"], training)

    def stem(self, x, training=False, capture=None):
        for i, s in enumerate(self.cfg.stem_strides, start=1):
            x = ad.conv2d(x, self._p(f"stem{i}.conv.weight"), None, stride=s, pad=1)
            x = ad.relu(self._bn(x, f"stem{i}.bn", training))
            if capture is not None:
                capture[f"stem{i}"] = x.shape
        return x

    def add_positional(self, x):
        if not self.cfg.use_pe:
            return x
        t, f = self.cfg.grid
        return ad.add(x, ad.reshape(self._p("pos_embed"), (1, 1, t, f)))

    def to_nodes(self, x):
        B, D, T, F = x.shape
        return ad.reshape(ad.permute(x, (0, 2, 3, 1)), (B, T * F, D))

    def from_nodes(self, x):
        B, N, D = x.shape
        T, F = self.cfg.grid
        return ad.permute(ad.reshape(x, (B, T, F, D)), (0, 3, 1, 2))

    def encoder_layer(self, X, l, capture=None):
        p = f"block{l}.enc"
        B, N, D = X.shape
        H, d = self.cfg.heads, self.cfg.head_dim
        h = ad.layernorm(X, self._p(f"{p}.ln1.gamma"), self._p(f"{p}.ln1.beta"))

        def heads(proj):
            y = ad.linear(h, self._p(f"{p}.attn.w_{proj}"), self.params.get(f"{p}.attn.b_{proj}"))
            return ad.permute(ad.reshape(y, (B, N, H, d)), (0, 2, 1, 3))

        q, k, v = heads("q"), heads("k"), heads("v")
        scores = ad.scale(ad.matmul(q, ad.swap_last(k)), 1.0 / math.sqrt(d))
        attn = ad.softmax(scores, axis=-1)
        if capture is not None:
            capture[f"attn{l}"] = attn.data
        o = ad.reshape(ad.permute(ad.matmul(attn, v), (0, 2, 1, 3)), (B, N, D))
        o = ad.linear(o, self._p(f"{p}.attn.w_o"), self._p(f"{p}.attn.b_o"))
        X = ad.add(X, o)
        h2 = ad.layernorm(X, self._p(f"{p}.ln2.gamma"), self._p(f"{p}.ln2.beta"))
        m = ad.gelu(ad.linear(h2, self._p(f"{p}.mlp.w_1"), self._p(f"{p}.mlp.b_1")))
        m = ad.linear(m, self._p(f"{p}.mlp.w_2"), self._p(f"{p}.mlp.b_2"))
        return ad.add(X, m)

    def mr_graph_conv(self, X, neighbors, l):
        p = f"block{l}.gnn"
        rel = ad.neighbor_max_diff(X, neighbors)
        return ad.linear(ad.concat([X, rel], axis=-1), self._p(f"{p}.w_update"), self._p(f"{p}.b_update"))

    def grapher(self, X, l, capture=None, graphs=None):
        p = f"block{l}.gnn"
        k = self.cfg.k_schedule[l - 1]
        h0 = ad.relu(ad.linear(X, self._p(f"{p}.w_in"), self._p(f"{p}.b_in")))
        neighbors = graphs[l] if graphs is not None and l in graphs else knn_indices(h0.data, k)
        if capture is not None:
            capture[f"graph{l}"] = neighbors
        h1 = self.mr_graph_conv(h0, neighbors, l)
        y = ad.linear(h1, self._p(f"{p}.w_out"), self._p(f"{p}.b_out"))
        return ad.add(y, X)

    def ffn(self, Y, l):
        p = f"block{l}.ffn"
        h = ad.relu(ad.linear(Y, self._p(f"{p}.w_1"), self._p(f"{p}.b_1")))
        return ad.add(ad.linear(h, self._p(f"{p}.w_2"), self._p(f"{p}.b_2")), Y)

    def head(self, x, training=False, capture=None):
        B = x.shape[0]
        pooled = ad.adaptive_avg_pool(x)
        h = ad.matmul(ad.reshape(pooled, (B, self.cfg.dim)), self._p("head.conv1.weight"))
        h = ad.relu(self._bn(h, "head.bn", training))
        logits = ad.linear(h, self._p("head.conv2.weight"), self._p("head.conv2.bias"))
        if capture is not None:
            capture["head.pool"] = pooled.shape
            capture["head.hidden"] = (B, self.cfg.head_hidden, 1, 1)
            capture["logits"] = logits.shape
        return logits

    def forward(self, spec, training=False, capture=None, graphs=None):
        x = spec if isinstance(spec, ad.Tensor) else ad.Tensor(np.asarray(spec, dtype=self._dtype()))
        if x.ndim == 2:
            x = ad.reshape(x, (1,) + x.shape)
        if tuple(x.shape[1:]) != self.cfg.input_shape:
            raise ValueError(f"expected input (B, {self.cfg.input_shape[0]}, {self.cfg.input_shape[1]}), got {x.shape}")
        x = ad.reshape(x, (x.shape[0], 1) + x.shape[1:])
        x = self.stem(x, training, capture)
        x = self.add_positional(x)
        X = self.to_nodes(x)
        if capture is not None:
            capture["nodes"] = X.shape
        for l in range(1, self.cfg.depth + 1):
            if self.cfg.use_encoder:
                X = self.encoder_layer(X, l, capture)
            if self.cfg.use_gnn:
                X = self.grapher(X, l, capture, graphs)
            if self.cfg.use_ffn:
                X = self.ffn(X, l)
        return self.head(self.from_nodes(X), training, capture)

    __call__ = forward

    def predict_proba(self, spec):
        with ad.no_grad():
            logits = self.forward(spec, training=False).data
        z = logits - logits.max(axis=-1, keepdims=True)
        e = np.exp(z)
        return e / e.sum(axis=-1, keepdims=True)

    def _dtype(self):
        return next(iter(self.params.values())).dtype

    # interpretability -------------------------------------------------------
    def attention_maps(self, spec, block):
        """Post-softmax (H, N, N) attention for one spectrogram at a 1-based block."""
        if not self.cfg.use_encoder:
            raise ValueError("model has no encoder")
        if not 1 <= block <= self.cfg.depth:
            raise ValueError(f"block must be in 1..{self.cfg.depth}")
        capture = {}
        with ad.no_grad():
            self.forward(spec, capture=capture)
        return capture[f"attn{block}"][0]

    def graph_neighbors(self, spec, block):
        if not self.cfg.use_gnn:
            raise ValueError("model has no grapher")
        if not 1 <= block <= self.cfg.depth:
            raise ValueError(f"block must be in 1..{self.cfg.depth}")
        capture = {}
        with ad.no_grad():
            self.forward(spec, capture=capture)
        return capture[f"graph{block}"][0]


def node_coords(n, grid=(32, 8)):
    """Time-major node index -> (t, f)."""
    return divmod(int(n), grid[1])


def graph_edges(model, spec, block, center=None):
    """Edges (center_t, center_f, neighbor_t, neighbor_f, block, k), for one centre node or all of them."""
    nbrs = model.graph_neighbors(spec, block)
    grid = model.cfg.grid
    k = model.cfg.k_schedule[block - 1]
    centers = range(nbrs.shape[0]) if center is None else [center]
    return [(*node_coords(i, grid), *node_coords(j, grid), block, k) for i in centers for j in nbrs[i]]


def write_attention_csv(maps, out_dir, block):
    import os
    paths = []
    for h, m in enumerate(maps, start=1):
        path = os.path.join(out_dir, f"attention_block{block}_head{h}.csv")
        np.savetxt(path, m, delimiter=",", fmt="%.9g")
        paths.append(path)
    return paths


GRAPH_COLUMNS = ["center_t", "center_f", "neighbor_t", "neighbor_f", "block", "k"]


def write_graph_csv(edges, path):
    import csv
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(GRAPH_COLUMNS)
        w.writerows(edges)


# ------------------------------------------------------------------ checkpoints
# b"GTCK" | u16 version | u32 header length | JSON {"config", "meta"} |
# u32 record count | records: u8 kind (0 param, 1 buffer) | u16 name length |
# name | u8 ndim | u32 * ndim shape | little-endian f32 data

CKPT_MAGIC = b"GTCK"
CKPT_VERSION = 1


def save_checkpoint(path, model, meta=None):
    header = json.dumps({"config": model.cfg.to_dict(), "meta": meta or {}}, sort_keys=True).encode()
    records = [(0, k, v.data) for k, v in model.params.items()]
    records += [(1, k, v) for k, v in model.buffers.items()]
    with open(path, "wb") as fh:
        fh.write(CKPT_MAGIC)
        fh.write(struct.pack("<HI", CKPT_VERSION, len(header)))
        fh.write(header)
        fh.write(struct.pack("<I", len(records)))
        for kind, name, arr in records:
            nb = name.encode()
            arr = np.ascontiguousarray(arr, dtype="<f4")
            fh.write(struct.pack("<BH", kind, len(nb)))
            fh.write(nb)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(arr.tobytes())


def read_checkpoint(path):
    """Return (config dict, meta dict, list of (kind, name, array))."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if buf[:4] != CKPT_MAGIC:
        raise ValueError(f"{path}: not a GTCK checkpoint")
    version, hlen = struct.unpack_from("<HI", buf, 4)
    if version != CKPT_VERSION:
        raise ValueError(f"{path}: unsupported checkpoint version {version}")
    pos = 10
    header = json.loads(buf[pos:pos + hlen].decode())
    pos += hlen
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    records = []
    for _ in range(count):
        kind, nlen = struct.unpack_from("<BH", buf, pos)
        pos += 3
        name = buf[pos:pos + nlen].decode()
        pos += nlen
        (ndim,) = struct.unpack_from("<B", buf, pos)
        pos += 1
        shape = struct.unpack_from(f"<{ndim}I", buf, pos)
        pos += 4 * ndim
        n = int(np.prod(shape)) if ndim else 1
        arr = np.frombuffer(buf, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
        records.append((kind, name, arr))
    return header["config"], header["meta"], records


def load_checkpoint(path):
    """Rebuild a model from a checkpoint; returns (model, meta)."""
    cfg_dict, meta, records = read_checkpoint(path)
    model = GTransformer(ModelConfig.from_dict(cfg_dict))
    params = OrderedDict((n, a) for k, n, a in records if k == 0)
    buffers = OrderedDict((n, a) for k, n, a in records if k == 1)
    if set(params) != set(model.params):
        raise ValueError(f"{path}: parameter set does not match the stored config")
    model.load_state(params, buffers)
    return model, meta
