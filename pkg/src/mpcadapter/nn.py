"""Private neural operators and the one-way-communication adapter pipeline.

The adapter block (all on secret shares):

    u   = x @ down
    ln1 = LayerNorm(u)                      3 rounds
    q, k, v = ln1 @ Wq, ln1 @ Wk, ln1 @ Wv  1 round each
    A   = (W_L @ (Q K^T)) V                 2 matmul rounds + 1 linear (W_L)
    a   = u + A @ attn_out
    ln2 = LayerNorm(a)                      3 rounds
    z   = a + ReLU(ln2 @ fc1) @ fc2         1 + 9 + 1 rounds
    out = x + scaler * (z @ up)             1 round

which is exactly 26 rounds per adapter (9 linear + 2 matmul + 6 norm +
9 activation); the pipeline tail adds a 2-round norm on the [CLS] row and
one classifier round, for 26 s + 3 total.

Attention is comparison-free: no Softmax, division, or sign test anywhere
on that path.  A plaintext fixed-point twin and a float64 twin implement
the identical wiring (including the inverse-sqrt polynomial) and serve as
correctness oracles.
"""

from dataclasses import dataclass

import numpy as np

from .ring import (DEFAULT_CONFIG, FixedPointConfig, FixedTensor, decode_fixed,
                   encode_fixed, matmul_plain, mul_fixed_plain, truncate)
from .runtime import Channel, run_two_party
from .sharing import (ArithShareTensor, PartyDealer, ltz, matmul_beaver_many,
                      mul_beaver_many, party_dealer, share_arith,
                      truncate_share)

# Inverse-sqrt polynomial coefficients (low -> high degree), minimax in
# relative error.  The round budget caps the norm at a cubic (3-round
# budget) or affine (2-round budget) polynomial of the variance, so the
# usable window is limited:
#   cubic:  fit on var in [1/3, 3], max relative error 3.8%
#   affine: fit on var in [0.41, 2.45], max relative error 13.9%
# Outside the window the error grows quickly; weight initialization keeps
# activations in range.
RSQRT_CUBIC = (2.2187611396873352, -1.9202746582323935,
               0.8311371565425836, -0.12523541730492255)
RSQRT_CUBIC_WINDOW = (1.0 / 3.0, 3.0)
RSQRT_AFFINE = (1.5068068414235278, -0.39063467956847275)
RSQRT_AFFINE_WINDOW = (0.4083, 2.4490)


def rsqrt_poly(budget: int):
    if budget == 3:
        return RSQRT_CUBIC
    if budget == 2:
        return RSQRT_AFFINE
    raise ValueError(f"norm round budget must be 2 or 3, got {budget}")


@dataclass(frozen=True)
class AdapterConfig:
    h: int = 1
    r: int = 8
    s: int = 1
    scaler: float = 0.5
    d_model: int = 32
    n_tokens: int = 8
    n_classes: int = 10

    def __post_init__(self):
        if self.h < 1 or self.r < 1 or self.s < 1:
            raise ValueError("h, r, s must all be >= 1")
        if self.r % self.h:
            raise ValueError(f"rank {self.r} not divisible by heads {self.h}")
        if not 0.0 <= self.scaler <= 4.0:
            raise ValueError(f"scaler must be in [0, 4], got {self.scaler}")
        if self.d_model < 2 or self.n_tokens < 2 or self.n_classes < 1:
            raise ValueError("invalid model dimensions")

    @property
    def head_dim(self) -> int:
        return self.r // self.h

    @property
    def mlp_dim(self) -> int:
        return 2 * self.r

    def digest_words(self, extra=()) -> np.ndarray:
        fields = (self.h, self.r, self.s, int(round(self.scaler * 65536)),
                  self.d_model, self.n_tokens, self.n_classes) + tuple(extra)
        return np.array(fields, dtype=np.uint64)


ROUNDS_PER_ADAPTER = 26
ROUNDS_TAIL = 3


def adapter_weight_shapes(config: AdapterConfig) -> dict:
    d, r, n, m = config.d_model, config.r, config.n_tokens, config.mlp_dim
    return {
        "down": (d, r), "wq": (r, r), "wk": (r, r), "wv": (r, r),
        "wl": (n, n), "attn_out": (r, r), "up": (r, d),
        "fc1": (r, m), "fc2": (m, r),
        "ln1.gain": (r,), "ln1.bias": (r,),
        "ln2.gain": (r,), "ln2.bias": (r,),
    }


def weight_names(config: AdapterConfig) -> list:
    names = []
    for i in range(config.s):
        names += [f"adapter{i}.{k}" for k in adapter_weight_shapes(config)]
    names += ["final.gain", "final.bias", "classifier"]
    return names


def weight_shape(config: AdapterConfig, name: str):
    if name == "classifier":
        return (config.d_model, config.n_classes)
    if name in ("final.gain", "final.bias"):
        return (config.d_model,)
    _, key = name.split(".", 1)
    return adapter_weight_shapes(config)[key]


def random_weights(config: AdapterConfig, rng,
                   cfg: FixedPointConfig = DEFAULT_CONFIG) -> dict:
    """Random adapter weights, scaled so LayerNorm inputs keep variance
    near 1 (the inverse-sqrt window)."""
    d, r, n = config.d_model, config.r, config.n_tokens
    out = {}
    for name in weight_names(config):
        shape = weight_shape(config, name)
        if name.endswith(".gain"):
            vals = 1.0 + 0.05 * rng.standard_normal(shape)
        elif name.endswith(".bias"):
            vals = 0.02 * rng.standard_normal(shape)
        elif name.endswith(".wl"):
            # The attention path grows like n*sqrt(head_dim); damp the
            # token mixer so the residual stays a unit-scale perturbation
            # and the next norm's variance stays in the rsqrt window.
            vals = rng.standard_normal((n, n)) * 0.25 / (n * np.sqrt(n * config.head_dim))
        else:
            fan_in = shape[0]
            vals = rng.standard_normal(shape) / np.sqrt(fan_in)
        out[name] = FixedTensor.from_real(vals, cfg)
    return out


def random_features(config: AdapterConfig, rng,
                    cfg: FixedPointConfig = DEFAULT_CONFIG) -> FixedTensor:
    return FixedTensor.from_real(
        rng.standard_normal((config.n_tokens, config.d_model)), cfg)


def weights_to_float(weights: dict) -> dict:
    return {k: v.to_real() for k, v in weights.items()}


# ---------------------------------------------------------------------------
# private operators

@dataclass
class PartyContext:
    channel: Channel
    dealer: PartyDealer
    cfg: FixedPointConfig = DEFAULT_CONFIG

    @property
    def party_id(self) -> int:
        return self.channel.party_id


def _mul_public_real(ctx: PartyContext, x: ArithShareTensor, value: float):
    enc = encode_fixed(value, ctx.cfg)
    return truncate_share(x.mul_public(enc))


def _row_mean(ctx: PartyContext, x: ArithShareTensor) -> ArithShareTensor:
    d = x.shape[-1]
    total = ArithShareTensor(x.party_id,
                             np.sum(x.data, axis=-1, keepdims=True, dtype=np.uint64),
                             x.config)
    return _mul_public_real(ctx, total, 1.0 / d)


def linear_private(ctx: PartyContext, x: ArithShareTensor, w: ArithShareTensor,
                   bias: ArithShareTensor = None, label: str = "linear"):
    """x @ w (+ bias): one round, output truncated back to scale 2^f."""
    if x.shape[-1] != w.shape[-2]:
        raise ValueError(f"inner dimensions disagree: {x.shape} vs {w.shape}")
    triple = ctx.dealer.matmul_triple(x.shape, w.shape)
    (raw,) = matmul_beaver_many([(x, w)], [triple], ctx.channel, label=label)
    out = truncate_share(raw)
    if bias is not None:
        out = out + bias
    return out


def relu_private(ctx: PartyContext, x: ArithShareTensor) -> ArithShareTensor:
    """max(0, x), exact in the ring: sign extraction (8 rounds) plus one
    multiply computing x - b*x.  9 rounds total."""
    b = ltz(x, ctx.dealer, ctx.channel)
    triple = ctx.dealer.arith_triple(b.shape, x.shape)
    (prod,) = mul_beaver_many([(b, x)], [triple], ctx.channel, label="relu-mul")
    # b is at integer scale, so b*x is already at scale 2^f.
    return x - prod


def layernorm_private(ctx: PartyContext, x: ArithShareTensor,
                      gain: ArithShareTensor, bias: ArithShareTensor,
                      round_budget: int = 3) -> ArithShareTensor:
    """LayerNorm over the last axis in ``round_budget`` rounds.

    The inverse square root of the variance is a public-coefficient
    polynomial (cubic at budget 3, affine at budget 2), evaluated with the
    multiplies arranged so every round is one batched exchange:
      round 1: centered squares and gain*centered
      round 2: v*v and (gain*centered)*v        (budget 3 only)
      round 3: remaining cubic terms            (budget 2: this is round 2)
    """
    coeffs = rsqrt_poly(round_budget)
    mean = _row_mean(ctx, x)
    xc = x - mean
    dealer, ch = ctx.dealer, ctx.channel

    t_sq = dealer.arith_triple(xc.shape, xc.shape)
    t_gx = dealer.arith_triple(gain.shape, xc.shape)
    sq_raw, gx_raw = mul_beaver_many(
        [(xc, xc), (ArithShareTensor(x.party_id, gain.data, x.config), xc)],
        [t_sq, t_gx], ch, label="ln-var")
    v = _row_mean(ctx, truncate_share(sq_raw))
    gx = truncate_share(gx_raw)

    if round_budget == 2:
        t = dealer.arith_triple(gx.shape, v.shape)
        (gxv_raw,) = mul_beaver_many([(gx, v)], [t], ch, label="ln-apply")
        gxv = truncate_share(gxv_raw)
        terms = [_mul_public_real(ctx, gx, coeffs[0]),
                 _mul_public_real(ctx, gxv, coeffs[1])]
    else:
        t_v2 = dealer.arith_triple(v.shape, v.shape)
        t_gxv = dealer.arith_triple(gx.shape, v.shape)
        v2_raw, gxv_raw = mul_beaver_many([(v, v), (gx, v)], [t_v2, t_gxv],
                                          ch, label="ln-pow")
        v2 = truncate_share(v2_raw)
        gxv = truncate_share(gxv_raw)
        t_a = dealer.arith_triple(gx.shape, v2.shape)
        t_b = dealer.arith_triple(gxv.shape, v2.shape)
        gxv2_raw, gxv3_raw = mul_beaver_many([(gx, v2), (gxv, v2)],
                                             [t_a, t_b], ch, label="ln-apply")
        terms = [_mul_public_real(ctx, gx, coeffs[0]),
                 _mul_public_real(ctx, gxv, coeffs[1]),
                 _mul_public_real(ctx, truncate_share(gxv2_raw), coeffs[2]),
                 _mul_public_real(ctx, truncate_share(gxv3_raw), coeffs[3])]

    out = terms[0]
    for t in terms[1:]:
        out = out + t
    return out + ArithShareTensor(x.party_id, bias.data, x.config)


def _split_heads(x: ArithShareTensor, config: AdapterConfig) -> ArithShareTensor:
    n, r = x.shape
    data = x.data.reshape(n, config.h, config.head_dim).transpose(1, 0, 2)
    return ArithShareTensor(x.party_id, np.ascontiguousarray(data), x.config)


def _merge_heads(x: ArithShareTensor) -> ArithShareTensor:
    h, n, dh = x.shape
    data = x.data.transpose(1, 0, 2).reshape(n, h * dh)
    return ArithShareTensor(x.party_id, np.ascontiguousarray(data), x.config)


def linatten_private(ctx: PartyContext, q: ArithShareTensor, k: ArithShareTensor,
                     v: ArithShareTensor, wl: ArithShareTensor) -> ArithShareTensor:
    """Linear attention (W_L @ (Q K^T)) V on [heads, N, head_dim] shares.

    Two share-x-share matmul rounds plus the W_L linear round; all heads
    are batched, and there is no comparison, Softmax, or division.
    """
    h, n, dh = q.shape
    kt = ArithShareTensor(k.party_id,
                          np.ascontiguousarray(k.data.transpose(0, 2, 1)), k.config)
    t1 = ctx.dealer.matmul_triple(q.shape, kt.shape)
    (s_raw,) = matmul_beaver_many([(q, kt)], [t1], ctx.channel, label="atten-qk")
    scores = truncate_share(s_raw)  # [h, N, N]

    wl_b = ArithShareTensor(wl.party_id,
                            np.ascontiguousarray(np.broadcast_to(wl.data, (h, n, n))),
                            wl.config)
    mixed = linear_private(ctx, wl_b, scores, label="linear")

    t2 = ctx.dealer.matmul_triple(mixed.shape, v.shape)
    (a_raw,) = matmul_beaver_many([(mixed, v)], [t2], ctx.channel, label="atten-av")
    return truncate_share(a_raw)


def adapter_forward_private(ctx: PartyContext, x: ArithShareTensor,
                            w: dict, config: AdapterConfig,
                            prefix: str = "adapter0.") -> ArithShareTensor:
    """One adapter block on shares; exactly 26 rounds for any (h, r)."""
    g = lambda k: w[prefix + k]
    u = linear_private(ctx, x, g("down"))
    ln1 = layernorm_private(ctx, u, g("ln1.gain"), g("ln1.bias"), round_budget=3)
    q = linear_private(ctx, ln1, g("wq"))
    k = linear_private(ctx, ln1, g("wk"))
    v = linear_private(ctx, ln1, g("wv"))
    att = linatten_private(ctx, _split_heads(q, config), _split_heads(k, config),
                           _split_heads(v, config), g("wl"))
    a = u + linear_private(ctx, _merge_heads(att), g("attn_out"))
    ln2 = layernorm_private(ctx, a, g("ln2.gain"), g("ln2.bias"), round_budget=3)
    m = relu_private(ctx, linear_private(ctx, ln2, g("fc1")))
    z = a + linear_private(ctx, m, g("fc2"))
    return x + _mul_public_real(ctx, linear_private(ctx, z, g("up")), config.scaler)


def pipeline_forward_private(ctx: PartyContext, x: ArithShareTensor,
                             w: dict, config: AdapterConfig) -> ArithShareTensor:
    """Full pipeline: s adapters, 2-round norm on [CLS], classifier.
    26 s + 3 rounds; returns the share of the logit vector."""
    for i in range(config.s):
        x = adapter_forward_private(ctx, x, w, config, prefix=f"adapter{i}.")
    cls = ArithShareTensor(x.party_id, x.data[0:1, :], x.config)
    normed = layernorm_private(ctx, cls, w["final.gain"], w["final.bias"],
                               round_budget=2)
    logits = linear_private(ctx, normed, w["classifier"])
    return ArithShareTensor(x.party_id, logits.data.reshape(-1), x.config)


# ---------------------------------------------------------------------------
# plaintext twins (correctness oracles)

def _row_mean_plain(x: FixedTensor) -> FixedTensor:
    total = np.sum(x.data, axis=-1, keepdims=True, dtype=np.uint64)
    enc = encode_fixed(1.0 / x.shape[-1], x.config)
    return FixedTensor(truncate(total * enc, x.config), x.config)


def _mul_public_plain(x: FixedTensor, value: float) -> FixedTensor:
    enc = encode_fixed(value, x.config)
    return FixedTensor(truncate(x.data * enc, x.config), x.config)


def layernorm_plain(x: FixedTensor, gain: FixedTensor, bias: FixedTensor,
                    round_budget: int = 3) -> FixedTensor:
    coeffs = rsqrt_poly(round_budget)
    mean = _row_mean_plain(x)
    xc = x - mean
    sq = mul_fixed_plain(xc, xc)
    v = _row_mean_plain(sq)
    gx = mul_fixed_plain(FixedTensor(gain.data, gain.config), xc)
    acc = _mul_public_plain(gx, coeffs[0])
    term = gx
    for c in coeffs[1:]:
        term = mul_fixed_plain(term, v)
        acc = acc + _mul_public_plain(term, c)
    return acc + FixedTensor(bias.data, bias.config)


def relu_plain(x: FixedTensor) -> FixedTensor:
    neg = x.data.view(np.int64) < 0
    return FixedTensor(np.where(neg, np.uint64(0), x.data), x.config)


def adapter_forward_plain(x: FixedTensor, w: dict, config: AdapterConfig,
                          prefix: str = "adapter0.") -> FixedTensor:
    g = lambda k: w[prefix + k]
    u = matmul_plain(x, g("down"))
    ln1 = layernorm_plain(u, g("ln1.gain"), g("ln1.bias"), 3)
    n, r, h, dh = config.n_tokens, config.r, config.h, config.head_dim
    split = lambda t: FixedTensor(np.ascontiguousarray(
        t.data.reshape(n, h, dh).transpose(1, 0, 2)), t.config)
    q = split(matmul_plain(ln1, g("wq")))
    k = split(matmul_plain(ln1, g("wk")))
    v = split(matmul_plain(ln1, g("wv")))
    kt = FixedTensor(np.ascontiguousarray(k.data.transpose(0, 2, 1)), k.config)
    scores = matmul_plain(q, kt)
    wl_b = FixedTensor(np.ascontiguousarray(
        np.broadcast_to(g("wl").data, (h, n, n))), x.config)
    att = matmul_plain(matmul_plain(wl_b, scores), v)
    merged = FixedTensor(np.ascontiguousarray(
        att.data.transpose(1, 0, 2).reshape(n, r)), x.config)
    a = u + matmul_plain(merged, g("attn_out"))
    ln2 = layernorm_plain(a, g("ln2.gain"), g("ln2.bias"), 3)
    m = relu_plain(matmul_plain(ln2, g("fc1")))
    z = a + matmul_plain(m, g("fc2"))
    return x + _mul_public_plain(matmul_plain(z, g("up")), config.scaler)


def pipeline_forward_plain(x: FixedTensor, w: dict,
                           config: AdapterConfig) -> FixedTensor:
    for i in range(config.s):
        x = adapter_forward_plain(x, w, config, prefix=f"adapter{i}.")
    cls = FixedTensor(x.data[0:1, :], x.config)
    normed = layernorm_plain(cls, w["final.gain"], w["final.bias"], 2)
    logits = matmul_plain(normed, w["classifier"])
    return FixedTensor(logits.data.reshape(-1), x.config)


def layernorm_float(x, gain, bias, round_budget=3):
    coeffs = rsqrt_poly(round_budget)
    xc = x - x.mean(axis=-1, keepdims=True)
    v = (xc * xc).mean(axis=-1, keepdims=True)
    y = sum(c * v**i for i, c in enumerate(coeffs))
    return gain * xc * y + bias


def adapter_forward_float(x, w, config: AdapterConfig, prefix="adapter0."):
    g = lambda k: w[prefix + k]
    n, r, h, dh = config.n_tokens, config.r, config.h, config.head_dim
    u = x @ g("down")
    ln1 = layernorm_float(u, g("ln1.gain"), g("ln1.bias"), 3)
    split = lambda t: t.reshape(n, h, dh).transpose(1, 0, 2)
    q, k, v = split(ln1 @ g("wq")), split(ln1 @ g("wk")), split(ln1 @ g("wv"))
    scores = q @ k.transpose(0, 2, 1)
    att = (g("wl") @ scores) @ v
    merged = att.transpose(1, 0, 2).reshape(n, r)
    a = u + merged @ g("attn_out")
    ln2 = layernorm_float(a, g("ln2.gain"), g("ln2.bias"), 3)
    m = np.maximum(0.0, ln2 @ g("fc1"))
    z = a + m @ g("fc2")
    return x + config.scaler * (z @ g("up"))


def pipeline_forward_float(x, w, config: AdapterConfig):
    for i in range(config.s):
        x = adapter_forward_float(x, w, config, prefix=f"adapter{i}.")
    cls = x[0:1, :]
    normed = layernorm_float(cls, w["final.gain"], w["final.bias"], 2)
    return (normed @ w["classifier"]).reshape(-1)


# ---------------------------------------------------------------------------
# two-party inference driver

class ConfigMismatchError(RuntimeError):
    pass


_SEED_TAGS = {"dealer": 0, "features": 1, "weights": 2, "inputs": 3}


def derived_rng(seed: int, tag: str) -> np.random.Generator:
    ss = np.random.SeedSequence(entropy=seed, spawn_key=(_SEED_TAGS[tag],))
    return np.random.Generator(np.random.PCG64(ss))


def inference_party(party_id: int, config: AdapterConfig, seed: int,
                    weights: dict = None, features: list = None,
                    cfg: FixedPointConfig = DEFAULT_CONFIG):
    """Build the protocol closure for one party.

    Party 0 is the feature holder (model user); party 1 holds the adapter
    weights (service provider).  Setup (weight/feature distribution) and
    the final result transfer are metered under their own labels so the
    pipeline round ledger stays clean.
    """
    if party_id == 0 and features is None:
        raise ValueError("party 0 needs the feature tensors")
    if party_id == 1 and weights is None:
        raise ValueError("party 1 needs the weights")
    names = weight_names(config)
    feat_shape = (config.n_tokens, config.d_model)

    def protocol(channel: Channel):
        dealer = party_dealer(
            int(derived_rng(seed, "dealer").integers(1 << 62)), party_id)
        ctx = PartyContext(channel, dealer, cfg)

        # Handshake: both sides verify they run the same configuration;
        # the model-user side also announces how many inputs follow.
        n_inputs = len(features) if party_id == 0 else 0
        digest = config.digest_words(extra=(cfg.frac_bits, n_inputs))
        (peer_digest,) = channel.exchange("setup", [digest])
        if not np.array_equal(digest[:-1], peer_digest[:-1]):
            raise ConfigMismatchError(
                f"peer runs a different configuration: {peer_digest.tolist()} "
                f"vs {digest.tolist()}")
        if party_id == 1:
            n_inputs = int(peer_digest[-1])

        # Distribution: feature shares flow one way, weight shares the
        # other, in a single batched round.
        if party_id == 0:
            rng = derived_rng(seed, "features")
            inputs, send = [], []
            for feat in features:
                s0, s1 = share_arith(feat, rng)
                inputs.append(s0)
                send.append(s1.data)
            recv_shapes = [weight_shape(config, n) for n in names]
            got = channel.exchange("setup", send, recv_shapes)
            wshares = {n: ArithShareTensor(0, arr, cfg)
                       for n, arr in zip(names, got)}
        else:
            rng = derived_rng(seed, "weights")
            send, wshares = [], {}
            for n in names:
                s0, s1 = share_arith(weights[n], rng)
                wshares[n] = s1
                send.append(s0.data)
            got = channel.exchange("setup", send, [feat_shape] * n_inputs)
            inputs = [ArithShareTensor(1, arr, cfg) for arr in got]

        # Online phase: only masked Beaver openings may cross the wire.
        channel.forbid_plain_open = True
        logits_shares = []
        rounds_per_input = []
        for x in inputs:
            snap = channel.meter.snapshot()
            logits_shares.append(pipeline_forward_private(ctx, x, wshares, config))
            rounds_per_input.append(channel.meter.since(snap)[0])
        channel.forbid_plain_open = False

        # Result retrieval: the provider returns its logit shares; only
        # the model user learns the plaintext prediction.
        if party_id == 0:
            got = channel.exchange("result", [np.zeros(0, np.uint64)],
                                   [s.shape for s in logits_shares])
            logits = [decode_fixed(s.data + peer, cfg)
                      for s, peer in zip(logits_shares, got)]
            return {"logits": logits, "pipeline_rounds": rounds_per_input}
        channel.exchange("result", [s.data for s in logits_shares],
                         [(0,)])
        return {"pipeline_rounds": rounds_per_input}

    return protocol


def private_inference(config: AdapterConfig, weights: dict, features: list,
                      seed: int, cfg: FixedPointConfig = DEFAULT_CONFIG,
                      timeout: float = 30.0):
    """In-process two-party inference over a list of feature tensors.

    Returns (result dict from the model-user side, (meter0, meter1)).
    """
    p0 = inference_party(0, config, seed, features=features, cfg=cfg)
    p1 = inference_party(1, config, seed, weights=weights, cfg=cfg)
    out0, _, meters = run_two_party(p0, p1, timeout=timeout)
    return out0, meters
