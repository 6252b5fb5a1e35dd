"""Plain-numpy reference forward pass, vectorized over many parameter vectors,
for finite-difference gradient checks."""
import numpy as np

from bounded.net import PARAM_NAMES, backward, init_model

H = 1e-5
KINK_MARGIN = 1e-3      # redraw when a leaky-ReLU input sits this close to 0
DENOM_FLOOR = 1e-6      # well above central-difference roundoff (~1e-11 here)


def flatten(model):
    return np.concatenate([model.params[k].ravel() for k in PARAM_NAMES])


def unflatten(thetas, model):
    out = {}
    pos = 0
    for k in PARAM_NAMES:
        shape = model.params[k].shape
        size = int(np.prod(shape))
        out[k] = thetas[:, pos:pos + size].reshape((len(thetas),) + shape)
        pos += size
    return out


def losses(thetas, model, x, labels, masks, gamma=2.0):
    """Focal loss for each row of ``thetas``; also the pre-activations of row 0."""
    p = unflatten(np.atleast_2d(thetas), model)
    slope = model.leaky_slope
    keep = 1.0 / (1.0 - model.dropout_p)
    z = (x.reshape(len(x), -1) - model.mean) / model.std
    z = z.reshape(x.shape)
    pairs = np.concatenate([z[:, :-1], z[:, 1:]], axis=2)                      # (n, m-1, 24)
    a0 = np.einsum("npi,Pio->Pnpo", pairs, p["fusion_w"]) + p["fusion_b"][:, None, None, :]
    h0 = np.where(a0 > 0, a0, slope * a0).reshape(a0.shape[0], a0.shape[1], -1)
    a1 = np.einsum("Pni,Pio->Pno", h0, p["w1"]) + p["b1"][:, None, :]
    h1 = np.where(a1 > 0, a1, slope * a1)
    if masks is not None:
        h1 = h1 * masks[0] * keep
    a2 = np.einsum("Pni,Pio->Pno", h1, p["w2"]) + p["b2"][:, None, :]
    h2 = np.where(a2 > 0, a2, slope * a2)
    if masks is not None:
        h2 = h2 * masks[1] * keep
    logits = np.einsum("Pni,Pio->Pno", h2, p["w3"]) + p["b3"][:, None, :]
    logits = logits - logits.max(axis=2, keepdims=True)
    probs = np.exp(logits)
    probs /= probs.sum(axis=2, keepdims=True)
    pt = probs[:, np.arange(len(labels)), labels]
    loss = np.mean(-((1 - pt) ** gamma) * np.log(np.maximum(pt, 1e-12)), axis=1)
    return loss, (a0[0], a1[0], a2[0])


def draw(rng, n_scales=4, batch=8, dropout=True):
    """A random model, batch and dropout masks with no activation near its kink."""
    while True:
        model = init_model(scales=tuple(range(16 * n_scales, 0, -16)), rng=rng)
        model.mean = rng.standard_normal(n_scales * 12)
        model.std = rng.uniform(0.5, 2.0, n_scales * 12)
        x = rng.standard_normal((batch, n_scales, 12)) * model.std.reshape(n_scales, 12) + model.mean.reshape(n_scales, 12)
        labels = rng.integers(0, 3, batch)
        masks = (rng.random((batch, 24)) < 0.5, rng.random((batch, 16)) < 0.5) if dropout else None
        _, pre = losses(flatten(model)[None], model, x, labels, masks)
        if min(np.min(np.abs(a)) for a in pre) > KINK_MARGIN:
            return model, x, labels, masks


def relative_errors(model, x, labels, masks):
    """|analytic - numeric| / max(|analytic|, |numeric|, floor) for every parameter."""
    loss, grads = backward(model, x, labels, masks=masks, training=masks is not None)
    analytic = np.concatenate([grads[k].ravel() for k in PARAM_NAMES])
    theta = flatten(model)
    eye = np.eye(len(theta)) * H
    lp, _ = losses(theta + eye, model, x, labels, masks)
    lm, _ = losses(theta - eye, model, x, labels, masks)
    numeric = (lp - lm) / (2 * H)
    denom = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), DENOM_FLOOR)
    return np.abs(analytic - numeric) / denom, loss, losses(theta[None], model, x, labels, masks)[0][0]
