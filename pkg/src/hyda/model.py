"""The adapter network: parameters plus the forward pass for each ablation setting."""
from __future__ import annotations

import zlib

import numpy as np

from . import numerics as nm
from .cohort import IMAGING, TABULAR, unpack
from .config import RunConfig
from .errors import ConfigError, ShapeError
from .fusion import FusionParams, KernelGenerator, fuse_all, generator_weight_count
from .heads import MLPParams, average_prediction, discriminative_classify, mlp_encode, total_loss
from .hypergraph import HgLayer, build_hypergraph, hgconv, hypergraph_classify, vertex_feature_dropout

USES_HG = ("hg_only", "avg_heads", "full_hyda")
USES_DISC = ("disc_only", "avg_heads", "full_hyda")


def _uniform(name, seed, shape, bound):
    # per-name stream: every parameter gets the same init whatever else exists
    rng = np.random.default_rng([seed, zlib.crc32(name.encode())])
    return rng.uniform(-bound, bound, size=shape)


class HyDANet:
    def __init__(self, config: RunConfig, layout, num_classes: int, seed: int = 0):
        self.config = config
        self.layout = tuple(layout)
        self.num_classes = int(num_classes)
        self.imaging = [m for m in self.layout if m.kind == IMAGING]
        self.tabular = next((m for m in self.layout if m.kind == TABULAR), None)
        self._check_shapes()
        self.params = nm.ModelParams()
        self._init_params(seed)

    def _check_shapes(self):
        cfg = self.config
        for m in self.imaging:
            c_hid, vox = m.map_shape[0], int(np.prod(m.map_shape[1:]))
            if cfg.C_hid is not None and cfg.C_hid != c_hid:
                raise ConfigError(f"C_hid={cfg.C_hid} but modality {m.name!r} maps have {c_hid} channels")
            if cfg.C_res is not None and cfg.C_res * vox != m.dim:
                raise ConfigError(f"C_res*D*H*W = {cfg.C_res * vox} != E_m = {m.dim} for {m.name!r}")
        shapes = {(m.dim, tuple(m.map_shape)) for m in self.imaging}
        if cfg.ablation == "full_hyda" and len(shapes) > 1:
            raise ConfigError("full_hyda needs identical embedding and map shapes across imaging modalities")

    @property
    def c_hid(self):
        return self.imaging[0].map_shape[0] if self.imaging else None

    @property
    def c_res(self):
        m = self.imaging[0]
        return m.dim // int(np.prod(m.map_shape[1:]))

    @property
    def node_dim(self):
        return sum(m.dim for m in self.imaging) + (self.config.tab_embed_dim if self.tabular else 0)

    def _init_params(self, seed):
        cfg, P = self.config, self.params
        K, C = self.num_classes, cfg.C

        def weight(name, shape, fan_in, group="other"):
            P.add(name, _uniform(name, seed, shape, 1.0 / np.sqrt(fan_in)), group)

        def bias(name, n, group="other"):
            P.add(name, np.zeros(n), group)

        if self.tabular is not None:
            T, E = self.tabular.dim, cfg.tab_embed_dim
            weight("mlp.w1", (T, E), T)
            bias("mlp.b1", E)
            weight("mlp.w2", (E, E), E)
            bias("mlp.b2", E)
        if cfg.ablation in USES_HG:
            weight("hg1.weight", (self.node_dim, C), self.node_dim, "hypergraph")
            bias("hg1.bias", C, "hypergraph")
            weight("hg2.weight", (C, C), C, "hypergraph")
            bias("hg2.bias", C, "hypergraph")
            weight("hgcls.weight", (C, K), C, "hypergraph")
            bias("hgcls.bias", K, "hypergraph")
        if cfg.ablation == "full_hyda" and self.imaging:
            c_hid, c_out, c_res = self.c_hid, cfg.C_out, self.c_res
            for g in ("gen1", "gen2"):
                weight(f"{g}.conv1_w", (c_hid, C // 27), C // 27)
                bias(f"{g}.conv1_b", c_hid)
                # generated kernels then have unit fan-in scale over C_hid*27 inputs
                weight(f"{g}.conv2_w", (c_out, 1), 27 * c_hid)
                bias(f"{g}.conv2_b", c_out)
            weight("fuse.conv3_w", (c_hid, 2 * c_out), 2 * c_out)
            bias("fuse.conv3_b", c_hid)
            weight("fuse.conv4_w", (c_res, c_hid), c_hid)
            bias("fuse.conv4_b", c_res)
            weight("fuse.conv5_w", (c_res, c_hid), c_hid)
            bias("fuse.conv5_b", c_res)
            if cfg.zero_fusion_init:
                for name in P.names():
                    if name.startswith(("gen1.", "gen2.", "fuse.conv5")):
                        P[name].data[...] = 0.0
        if cfg.ablation in USES_DISC:
            weight("disc.weight", (self.node_dim, K), self.node_dim)
            bias("disc.bias", K)

    # --- parameter views ---------------------------------------------------------------

    def _layer(self, prefix):
        return HgLayer(self.params[f"{prefix}.weight"], self.params[f"{prefix}.bias"])

    def _generator(self, prefix):
        P = self.params
        return KernelGenerator(P[f"{prefix}.conv1_w"], P[f"{prefix}.conv1_b"],
                               P[f"{prefix}.conv2_w"], P[f"{prefix}.conv2_b"])

    def _fusion(self):
        P = self.params
        return FusionParams(*(P[f"fuse.{n}"] for n in
                              ("conv3_w", "conv3_b", "conv4_w", "conv4_b", "conv5_w", "conv5_b")))

    def param_counts(self) -> dict:
        counts = {"total": self.params.count()}
        if "gen1.conv1_w" in self.params:
            gen = self._generator("gen1")
            counts["kernel_generator_weights"] = gen.weight_count
            counts["kernel_generator_formula"] = generator_weight_count(self.config.C, self.c_hid,
                                                                        self.config.C_out)
            counts["kernel_generator_with_bias"] = self.params.count("gen1.")
        return counts

    # --- forward -------------------------------------------------------------------------

    def forward(self, X, training=False, rng=None, graph=None) -> dict:
        """Forward pass on packed rows ``X`` (one subject per row).

        The hypergraph is built over exactly these rows unless ``graph`` is given.
        Returns tensors ``p_g``, ``p_d`` (either may be None) and ``p_final``.
        """
        cfg = self.config
        blocks = unpack(X, self.layout)
        n = np.asarray(X).shape[0]
        if training and cfg.dropout_p > 0 and rng is None:
            raise ConfigError("training forward pass needs an rng for dropout")

        embeddings, maps, graph_inputs = {}, {}, {}
        for m in self.layout:
            emb, fmap = blocks[m.name]
            graph_inputs[m.name] = emb
            if m.kind == IMAGING:
                embeddings[m.name] = nm.Tensor(emb)
                maps[m.name] = nm.Tensor(fmap)
            else:
                P = self.params
                embeddings[m.name] = mlp_encode(nm.Tensor(emb), MLPParams(P["mlp.w1"], P["mlp.b1"],
                                                                        P["mlp.w2"], P["mlp.b2"]))
        X_nodes = nm.concat(list(embeddings.values()), axis=1)
        if X_nodes.shape[1] != self.node_dim:
            raise ShapeError(f"node features {X_nodes.shape} vs expected width {self.node_dim}")

        p_g = p_d = None
        f1 = f2 = None
        if cfg.ablation in USES_HG:
            if graph is None:
                graph = build_hypergraph(graph_inputs, min(cfg.k, n), cfg.backend)
            h = vertex_feature_dropout(X_nodes, cfg.dropout_p, training, rng)
            f1 = hgconv(graph, h, self._layer("hg1"), activate=True)
            f2 = hgconv(graph, f1, self._layer("hg2"), activate=True)
            p_g = hypergraph_classify(graph, f2, self._layer("hgcls"))
        if cfg.ablation in USES_DISC:
            enhanced = embeddings
            if cfg.ablation == "full_hyda" and self.imaging:
                enhanced = fuse_all(f1, f2, embeddings, maps, self._generator("gen1"),
                                    self._generator("gen2"), self._fusion())
            p_d = discriminative_classify(nm.concat(list(enhanced.values()), axis=1),
                                          self.params["disc.weight"], self.params["disc.bias"])
        if p_g is not None and p_d is not None:
            p_final = average_prediction(p_g, p_d)
        else:
            p_final = p_g if p_g is not None else p_d
        return {"p_g": p_g, "p_d": p_d, "p_final": p_final}

    def loss(self, out: dict, y):
        # single-head rows train on cross-entropy alone; two-head rows use the four-term loss
        both = out["p_g"] is not None and out["p_d"] is not None
        return total_loss(out["p_g"], out["p_d"], y, self.config.focal_gamma, self.config.focal_alpha, focal=both)
