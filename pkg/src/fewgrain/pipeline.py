"""End-to-end model assembly: backbone -> frequency neighborhood ->
cross modulation -> co-attention pooling, with per-stage ablation switches.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import backbone, dcm, mfn
from . import tensor as T
from .initutil import kaiming_uniform, rng_from_seed, zeros_param


@dataclass
class ModelConfig:
    backbone: backbone.BackboneConfig = field(
        default_factory=backbone.BackboneConfig)
    mfn: mfn.MfnConfig = field(default_factory=mfn.MfnConfig)
    loops: int = 2             # crisscross passes
    temperature: float = 2.0   # co-attention softmax temperature
    num_train_classes: int = 0  # width of the training-only aux classifier
    use_mfn: bool = True
    use_bcc: bool = True
    use_dca: bool = True
    dtype: type = np.float32


@dataclass
class Model:
    config: ModelConfig
    backbone_params: backbone.BackboneParams
    mfn_params: mfn.MfnParams
    dcm_params: dcm.DcmParams
    aux_w: T.Parameter
    aux_b: T.Parameter

    def parameters(self):
        out = list(self.backbone_params.parameters())
        out += list(self.mfn_params.parameters())
        out += self.dcm_params.parameters()
        out += [self.aux_w, self.aux_b]
        return out

    def param_dict(self):
        return {p.name: p for p in self.parameters()}


def init_model(config, seed, freq_set=None):
    """All parameter groups drawn from one deterministic stream per seed."""
    rng = rng_from_seed(seed)
    dt = config.dtype
    bp = backbone.init_params(config.backbone, rng)
    c = config.backbone.block_channels
    side = config.backbone.output_side()
    mp = mfn.init_params(c, side, config.mfn, rng, freq_set=freq_set, dtype=dt)
    dp = dcm.init_params(c, rng, loops=config.loops,
                         temperature=config.temperature, dtype=dt)
    ntr = max(config.num_train_classes, 1)
    aux_w = T.Parameter("aux/fc_w", kaiming_uniform(rng, (c, ntr), c, dt))
    aux_b = zeros_param("aux/fc_b", (ntr,), dt)
    return Model(config, bp, mp, dp, aux_w, aux_b)


def state_dict(model):
    """All trainable arrays plus batchnorm running statistics, by name."""
    out = {p.name: np.asarray(p.value.data).copy() for p in model.parameters()}
    for b, st in enumerate(model.backbone_params.bn_state):
        out[f"backbone/block{b}/bn_mean"] = st.running_mean.copy()
        out[f"backbone/block{b}/bn_var"] = st.running_var.copy()
    return out


def load_state(model, arrays):
    """Inverse of state_dict; unknown or missing names are errors."""
    table = model.param_dict()
    seen = set()
    for name, arr in arrays.items():
        if name.endswith("/bn_mean") or name.endswith("/bn_var"):
            block = int(name.split("/")[1].removeprefix("block"))
            st = model.backbone_params.bn_state[block]
            if name.endswith("/bn_mean"):
                st.running_mean = np.asarray(arr, dtype=st.running_mean.dtype)
            else:
                st.running_var = np.asarray(arr, dtype=st.running_var.dtype)
        elif name in table:
            table[name].assign(arr)
        else:
            raise KeyError(f"checkpoint has unknown parameter {name!r}")
        seen.add(name)
    missing = set(table) - seen
    if missing:
        raise KeyError(f"checkpoint missing parameters: {sorted(missing)}")


def config_to_dict(config):
    """Flatten a ModelConfig into the checkpoint's string map."""
    b, m = config.backbone, config.mfn
    return {
        "in_channels": str(b.in_channels),
        "channels": str(b.block_channels),
        "blocks": str(b.num_blocks),
        "side": str(b.input_side),
        "m": str(m.M), "u": str(m.U), "v": str(m.V),
        "loops": str(config.loops),
        "temperature": repr(float(config.temperature)),
        "train_classes": str(config.num_train_classes),
        "use_mfn": str(int(config.use_mfn)),
        "use_bcc": str(int(config.use_bcc)),
        "use_dca": str(int(config.use_dca)),
        "dtype": "f64" if config.dtype == np.float64 else "f32",
    }


def config_from_dict(d):
    dt = np.float64 if d.get("dtype") == "f64" else np.float32
    bcfg = backbone.BackboneConfig(
        in_channels=int(d["in_channels"]), block_channels=int(d["channels"]),
        num_blocks=int(d["blocks"]), input_side=int(d["side"]), dtype=dt)
    mcfg = mfn.MfnConfig(M=int(d["m"]), U=int(d["u"]), V=int(d["v"]))
    return ModelConfig(
        backbone=bcfg, mfn=mcfg, loops=int(d["loops"]),
        temperature=float(d["temperature"]),
        num_train_classes=int(d["train_classes"]),
        use_mfn=bool(int(d["use_mfn"])), use_bcc=bool(int(d["use_bcc"])),
        use_dca=bool(int(d["use_dca"])), dtype=dt)


def cosine_scores(f_hat_s, f_hat_q):
    """(Q,N) cosine similarities between paired pooled representations."""
    ns = T.l2_normalize(f_hat_s, axis=-1)
    nq = T.l2_normalize(f_hat_q, axis=-1)
    return T.tsum(ns * nq, axis=-1)


def forward_episode(model, images, support_labels, n_support, training=False):
    """Run the full pipeline over one episode's stacked images.

    images: (NK+NP, 3, S, S) array (support first); support_labels are the
    episode-local ids of the support rows.  Returns the pooled pair
    representations, cosine scores, and the query F-tilde map for the
    auxiliary loss.
    """
    cfg = model.config
    x = images if isinstance(images, T.Tensor) else T.Tensor(
        np.asarray(images, dtype=cfg.dtype))
    f = backbone.embed(x, model.backbone_params, training=training)
    if cfg.use_mfn:
        f_prime, f_tilde = mfn.mfn_forward(f, model.mfn_params)
    else:
        f_prime, f_tilde = backbone.FeatureMap(f.tensor, "multifreq"), f
    if cfg.use_bcc:
        f_star = dcm.bcc(f, f_prime, model.dcm_params)
    else:
        f_star = backbone.FeatureMap(f_prime.tensor, "modulated")

    total = x.shape[0]
    sup = f_star.tensor[:n_support]
    qry = f_star.tensor[n_support:total]
    protos = dcm.prototype(sup, support_labels)
    f_hat_s, f_hat_q = dcm.dcm_forward(protos, qry, model.dcm_params,
                                       uniform_attention=not cfg.use_dca)
    scores = cosine_scores(f_hat_s, f_hat_q)
    f_tilde_q = f_tilde.tensor[n_support:total]
    return {
        "f_star": f_star,
        "f_hat_s": f_hat_s,
        "f_hat_q": f_hat_q,
        "scores": scores,
        "f_tilde_q": f_tilde_q,
    }
