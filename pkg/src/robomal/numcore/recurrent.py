"""Fused recurrent scans for the bidirectional LSTM and the GRU.

Per-timestep work is expressed as one packed matrix product plus a handful
of contiguous elementwise kernels. Internals are feature-major ([rows,
batch]) so every gate block is a contiguous row slice; public weight
layouts stay conventional ([in, 4*hidden] with gate order i, f, o, g for
the LSTM and r, z, n for the GRU).

Packing details for the LSTM step. The input vector per step is

    hx = [h_fwd; h_bwd; x_t; x_reversed_t; 1]

and the packed weight matrix has one block row per gate with zeros tying
each direction to its own state and input. The trailing constant row folds
the bias into the same product. Sequence positions at or beyond a sample's
length are masked: state carries through unchanged, so padding never
influences the final hidden states or any gradient.

Backward passes are hand-derived and checked against central finite
differences in the test suite.
"""

from __future__ import annotations

import numpy as np


class _Workspace(dict):
    """Per-node scratch buffers, reused across evaluate calls; grown on demand."""

    def buf(self, key: str, shape: tuple[int, ...]) -> np.ndarray:
        arr = self.get(key)
        if arr is None or arr.shape[0] < shape[0] or arr.shape[1:] != shape[1:]:
            arr = np.empty((shape[0], *shape[1:]))
            self[key] = arr
        return arr[: shape[0]]


def _check_sequence_inputs(tokens, lengths, table):
    if tokens.ndim != 2 or tokens.dtype.kind not in "iu":
        raise ValueError(f"tokens must be an integer [batch, time] array, got {tokens.shape} {tokens.dtype}")
    if lengths.ndim != 1 or lengths.dtype.kind not in "iu":
        raise ValueError("lengths must be an integer [batch] array")
    if lengths.shape[0] != tokens.shape[0]:
        raise ValueError(f"batch mismatch: {tokens.shape[0]} token rows, {lengths.shape[0]} lengths")
    if tokens.shape[1] == 0 or lengths.min() < 1:
        raise ValueError("every sample needs at least one real position")
    if lengths.max() > tokens.shape[1]:
        raise ValueError(f"length {lengths.max()} exceeds sequence extent {tokens.shape[1]}")
    if tokens.min() < 0 or tokens.max() >= table.shape[0]:
        raise ValueError(f"token id outside embedding table of {table.shape[0]} rows")


# ---------------------------------------------------------------------------
# bidirectional LSTM
# ---------------------------------------------------------------------------

def _pack_bilstm(wx_f, wh_f, b_f, wx_b, wh_b, b_b, hidden, embed):
    h, e = hidden, embed
    n_in = 2 * h + 2 * e + 1
    wp = np.zeros((8 * h, n_in))
    for q in range(4):  # i f o g
        cols = slice(q * h, (q + 1) * h)
        rows_f = slice(2 * h * q, 2 * h * q + h)
        rows_b = slice(2 * h * q + h, 2 * h * (q + 1))
        wp[rows_f, 0:h] = wh_f[:, cols].T
        wp[rows_b, h:2 * h] = wh_b[:, cols].T
        wp[rows_f, 2 * h:2 * h + e] = wx_f[:, cols].T
        wp[rows_b, 2 * h + e:2 * h + 2 * e] = wx_b[:, cols].T
        wp[rows_f, -1] = b_f[cols]
        wp[rows_b, -1] = b_b[cols]
    return wp


def _unpack_bilstm_grads(dwp, hidden, embed):
    h, e = hidden, embed
    dwx_f = np.empty((e, 4 * h))
    dwh_f = np.empty((h, 4 * h))
    db_f = np.empty(4 * h)
    dwx_b = np.empty((e, 4 * h))
    dwh_b = np.empty((h, 4 * h))
    db_b = np.empty(4 * h)
    for q in range(4):
        cols = slice(q * h, (q + 1) * h)
        rows_f = slice(2 * h * q, 2 * h * q + h)
        rows_b = slice(2 * h * q + h, 2 * h * (q + 1))
        dwh_f[:, cols] = dwp[rows_f, 0:h].T
        dwh_b[:, cols] = dwp[rows_b, h:2 * h].T
        dwx_f[:, cols] = dwp[rows_f, 2 * h:2 * h + e].T
        dwx_b[:, cols] = dwp[rows_b, 2 * h + e:2 * h + 2 * e].T
        db_f[cols] = dwp[rows_f, -1]
        db_b[cols] = dwp[rows_b, -1]
    return (dwx_f, dwh_f, db_f), (dwx_b, dwh_b, db_b)


def bilstm_forward(tokens, lengths, table, weights_f, weights_b, hidden,
                   workspace: _Workspace | None = None):
    wx_f, wh_f, b_f = weights_f
    wx_b, wh_b, b_b = weights_b
    _check_sequence_inputs(tokens, lengths, table)
    vocab, embed = table.shape
    if wx_f.shape != (embed, 4 * hidden) or wh_f.shape != (hidden, 4 * hidden):
        raise ValueError(
            f"lstm weight shapes {wx_f.shape}/{wh_f.shape} inconsistent with "
            f"embed {embed}, hidden {hidden}")
    batch, t_max = tokens.shape
    h2 = 2 * hidden
    gates = 8 * hidden
    n_in = h2 + 2 * embed + 1
    ws = workspace if workspace is not None else _Workspace()

    wp = _pack_bilstm(wx_f, wh_f, b_f, wx_b, wh_b, b_b, hidden, embed)

    tok_tm = tokens.T  # [T, B]
    emb_fm = table.T[:, tok_tm]  # [E, T, B]

    hx_c = ws.buf("hx", (t_max, n_in, batch))
    z_c = ws.buf("z", (t_max, gates, batch))
    c_c = ws.buf("c", (t_max + 1, h2, batch))
    tc_c = ws.buf("tc", (t_max, h2, batch))
    scr = ws.buf("scr", (h2, batch))
    scr2 = ws.buf("scr2", (hidden, batch))
    h_fin = ws.buf("h_fin", (h2, batch))

    # masks: forward half freezes once t >= length, backward half is frozen
    # until its reversed sequence starts at t = t_max - length
    min_len = int(lengths.min())
    mask_f = (np.arange(t_max)[:, None] < lengths[None, :]).astype(np.float64)
    mask_b = mask_f[::-1]
    inv_f = 1.0 - mask_f
    inv_b = 1.0 - mask_b

    sl_i = slice(0, h2)
    sl_f = slice(h2, 2 * h2)
    sl_o = slice(2 * h2, 3 * h2)
    sl_g = slice(3 * h2, 4 * h2)
    fwd_half = slice(0, hidden)
    bwd_half = slice(hidden, h2)

    c_c[0] = 0.0
    hx_c[0, :h2] = 0.0
    hx_c[:, -1, :] = 1.0
    for t in range(t_max):
        hx = hx_c[t]
        hx[h2:h2 + embed] = emb_fm[:, t, :]
        hx[h2 + embed:-1] = emb_fm[:, t_max - 1 - t, :]
        z = z_c[t]
        np.dot(wp, hx, out=z)
        zs = z[: 3 * h2]
        zs *= 0.5
        np.tanh(z, out=z)
        zs *= 0.5
        zs += 0.5
        c_new = c_c[t + 1]
        np.multiply(z[sl_f], c_c[t], out=c_new)
        np.multiply(z[sl_i], z[sl_g], out=scr)
        c_new += scr
        h_new = h_fin if t == t_max - 1 else hx_c[t + 1][:h2]
        if t >= min_len:  # some forward-half state frozen
            ch = c_new[fwd_half]
            ch *= mask_f[t]
            np.multiply(c_c[t][fwd_half], inv_f[t], out=scr2)
            ch += scr2
        if t < t_max - min_len:  # some backward-half state not started
            ch = c_new[bwd_half]
            ch *= mask_b[t]
            np.multiply(c_c[t][bwd_half], inv_b[t], out=scr2)
            ch += scr2
        np.tanh(c_new, out=tc_c[t])
        np.multiply(z[sl_o], tc_c[t], out=h_new)
        if t >= min_len:
            hh = h_new[fwd_half]
            hh *= mask_f[t]
            np.multiply(hx[fwd_half], inv_f[t], out=scr2)
            hh += scr2
        if t < t_max - min_len:
            hh = h_new[bwd_half]
            hh *= mask_b[t]
            np.multiply(hx[bwd_half], inv_b[t], out=scr2)
            hh += scr2

    out = np.ascontiguousarray(h_fin.T)
    cache = {
        "tokens": tokens, "lengths": lengths, "vocab": vocab, "embed": embed,
        "hidden": hidden, "t_max": t_max, "batch": batch, "wp": wp,
        "hx": hx_c, "z": z_c, "c": c_c, "tc": tc_c,
        "mask_f": mask_f, "mask_b": mask_b, "inv_f": inv_f, "inv_b": inv_b,
        "min_len": min_len, "ws": ws,
    }
    return out, cache


def bilstm_backward(cache, grad_out):
    hidden = cache["hidden"]
    embed = cache["embed"]
    t_max = cache["t_max"]
    batch = cache["batch"]
    vocab = cache["vocab"]
    h2 = 2 * hidden
    wp = cache["wp"]
    hx_c, z_c, c_c, tc_c = cache["hx"], cache["z"], cache["c"], cache["tc"]
    mask_f, mask_b = cache["mask_f"], cache["mask_b"]
    inv_f, inv_b = cache["inv_f"], cache["inv_b"]
    min_len = cache["min_len"]
    ws: _Workspace = cache["ws"]

    sl_i = slice(0, h2)
    sl_f = slice(h2, 2 * h2)
    sl_o = slice(2 * h2, 3 * h2)
    sl_g = slice(3 * h2, 4 * h2)
    fwd_half = slice(0, hidden)
    bwd_half = slice(hidden, h2)

    wp_t = np.ascontiguousarray(wp.T)
    dwp = np.zeros_like(wp)
    dz = ws.buf("dz", (8 * hidden, batch))
    dhx = ws.buf("dhx", (wp.shape[1], batch))
    wscr = ws.buf("wscr", wp.shape)
    s = ws.buf("bs", (h2, batch))
    s6 = ws.buf("bs6", (3 * h2, batch))
    hpass = ws.buf("hpass", (hidden, batch))
    cpass = ws.buf("cpass", (hidden, batch))
    hpass_b = ws.buf("hpass_b", (hidden, batch))
    cpass_b = ws.buf("cpass_b", (hidden, batch))
    dxf = ws.buf("dxf", (t_max, embed, batch))
    dxr = ws.buf("dxr", (t_max, embed, batch))

    dh = np.ascontiguousarray(grad_out.T)
    dc = np.zeros((h2, batch))

    for t in range(t_max - 1, -1, -1):
        z = z_c[t]
        masked_f = t >= min_len
        masked_b = t < t_max - min_len
        if masked_f:
            np.multiply(dh[fwd_half], inv_f[t], out=hpass)
            dh[fwd_half] *= mask_f[t]
        if masked_b:
            np.multiply(dh[bwd_half], inv_b[t], out=hpass_b)
            dh[bwd_half] *= mask_b[t]
        # output gate and cell path
        np.multiply(dh, tc_c[t], out=dz[sl_o])
        np.multiply(tc_c[t], tc_c[t], out=s)
        np.subtract(1.0, s, out=s)
        np.multiply(s, z[sl_o], out=s)
        s *= dh
        dc += s
        if masked_f:
            np.multiply(dc[fwd_half], inv_f[t], out=cpass)
            dc[fwd_half] *= mask_f[t]
        if masked_b:
            np.multiply(dc[bwd_half], inv_b[t], out=cpass_b)
            dc[bwd_half] *= mask_b[t]
        np.multiply(dc, z[sl_g], out=dz[sl_i])
        np.multiply(dc, c_c[t], out=dz[sl_f])
        np.multiply(dc, z[sl_i], out=dz[sl_g])
        dc *= z[sl_f]
        if masked_f:
            dc[fwd_half] += cpass
        if masked_b:
            dc[bwd_half] += cpass_b
        # nonlinearity derivatives: sigma'(v) = s - s^2, tanh'(v) = 1 - g^2
        zs = z[: 3 * h2]
        np.multiply(zs, zs, out=s6)
        np.subtract(zs, s6, out=s6)
        dz[: 3 * h2] *= s6
        np.multiply(z[sl_g], z[sl_g], out=s)
        np.subtract(1.0, s, out=s)
        dz[sl_g] *= s
        # packed weight and state gradients
        np.dot(dz, hx_c[t].T, out=wscr)
        dwp += wscr
        np.dot(wp_t, dz, out=dhx)
        dh[:] = dhx[:h2]
        if masked_f:
            dh[fwd_half] += hpass
        if masked_b:
            dh[bwd_half] += hpass_b
        dxf[t] = dhx[h2:h2 + embed]
        dxr[t] = dhx[h2 + embed:-1]

    tok_nat = cache["tokens"].T.ravel()
    tok_rev = cache["tokens"].T[::-1].ravel()
    d_table = np.empty((vocab, embed))
    for e in range(embed):
        d_table[:, e] = (
            np.bincount(tok_nat, weights=dxf[:, e, :].ravel(), minlength=vocab)
            + np.bincount(tok_rev, weights=dxr[:, e, :].ravel(), minlength=vocab))
    grads_f, grads_b = _unpack_bilstm_grads(dwp, hidden, embed)
    return d_table, grads_f, grads_b


# ---------------------------------------------------------------------------
# GRU (single direction)
# ---------------------------------------------------------------------------
# Update/reset formulation with a candidate state:
#   r = sigma(x wx_r + bx_r + h wh_r + bh_r)
#   z = sigma(x wx_z + bx_z + h wh_z + bh_z)
#   n = tanh(x wx_n + bx_n + r * (h wh_n + bh_n))
#   h' = (1 - z) * n + z * h
# Packed rows: [r | z | a | q] with a the x side of n and q the h side;
# a and q stay linear through the packed product.

def _pack_gru(wx, wh, bx, bh, hidden, embed):
    h, e = hidden, embed
    wp = np.zeros((4 * h, h + e + 1))
    for q, cols in enumerate((slice(0, h), slice(h, 2 * h))):  # r, z rows
        rows = slice(q * h, (q + 1) * h)
        wp[rows, 0:h] = wh[:, cols].T
        wp[rows, h:h + e] = wx[:, cols].T
        wp[rows, -1] = bx[cols] + bh[cols]
    n_cols = slice(2 * h, 3 * h)
    wp[2 * h:3 * h, h:h + e] = wx[:, n_cols].T   # a rows: x side only
    wp[2 * h:3 * h, -1] = bx[n_cols]
    wp[3 * h:4 * h, 0:h] = wh[:, n_cols].T       # q rows: h side only
    wp[3 * h:4 * h, -1] = bh[n_cols]
    return wp


def _unpack_gru_grads(dwp, hidden, embed):
    h, e = hidden, embed
    dwx = np.empty((e, 3 * h))
    dwh = np.empty((h, 3 * h))
    dbx = np.empty(3 * h)
    dbh = np.empty(3 * h)
    for q, cols in enumerate((slice(0, h), slice(h, 2 * h))):
        rows = slice(q * h, (q + 1) * h)
        dwh[:, cols] = dwp[rows, 0:h].T
        dwx[:, cols] = dwp[rows, h:h + e].T
        dbx[cols] = dwp[rows, -1]
        dbh[cols] = dwp[rows, -1]
    n_cols = slice(2 * h, 3 * h)
    dwx[:, n_cols] = dwp[2 * h:3 * h, h:h + e].T
    dbx[n_cols] = dwp[2 * h:3 * h, -1]
    dwh[:, n_cols] = dwp[3 * h:4 * h, 0:h].T
    dbh[n_cols] = dwp[3 * h:4 * h, -1]
    return dwx, dwh, dbx, dbh


def gru_forward(tokens, lengths, table, wx, wh, bx, bh, hidden,
                workspace: _Workspace | None = None):
    _check_sequence_inputs(tokens, lengths, table)
    vocab, embed = table.shape
    if wx.shape != (embed, 3 * hidden) or wh.shape != (hidden, 3 * hidden):
        raise ValueError(
            f"gru weight shapes {wx.shape}/{wh.shape} inconsistent with "
            f"embed {embed}, hidden {hidden}")
    batch, t_max = tokens.shape
    ws = workspace if workspace is not None else _Workspace()
    wp = _pack_gru(wx, wh, bx, bh, hidden, embed)

    emb_fm = table.T[:, tokens.T]  # [E, T, B]

    n_in = hidden + embed + 1
    hx_c = ws.buf("hx", (t_max, n_in, batch))
    z_c = ws.buf("z", (t_max, 4 * hidden, batch))
    scr = ws.buf("scr", (hidden, batch))
    h_fin = ws.buf("h_fin", (hidden, batch))

    min_len = int(lengths.min())
    mask = (np.arange(t_max)[:, None] < lengths[None, :]).astype(np.float64)
    inv = 1.0 - mask

    sl_r = slice(0, hidden)
    sl_z = slice(hidden, 2 * hidden)
    sl_n = slice(2 * hidden, 3 * hidden)  # a rows, overwritten by n
    sl_q = slice(3 * hidden, 4 * hidden)

    hx_c[0, :hidden] = 0.0
    hx_c[:, -1, :] = 1.0
    for t in range(t_max):
        hx = hx_c[t]
        hx[hidden:-1] = emb_fm[:, t, :]
        z = z_c[t]
        np.dot(wp, hx, out=z)
        zrz = z[: 2 * hidden]
        zrz *= 0.5
        np.tanh(zrz, out=zrz)
        zrz *= 0.5
        zrz += 0.5
        np.multiply(z[sl_r], z[sl_q], out=scr)
        z[sl_n] += scr
        np.tanh(z[sl_n], out=z[sl_n])
        h_new = h_fin if t == t_max - 1 else hx_c[t + 1][:hidden]
        np.subtract(hx[:hidden], z[sl_n], out=h_new)
        h_new *= z[sl_z]
        h_new += z[sl_n]
        if t >= min_len:
            h_new *= mask[t]
            np.multiply(hx[:hidden], inv[t], out=scr)
            h_new += scr

    out = np.ascontiguousarray(h_fin.T)
    cache = {
        "tokens": tokens, "vocab": vocab, "embed": embed, "hidden": hidden,
        "t_max": t_max, "batch": batch, "wp": wp, "hx": hx_c, "z": z_c,
        "mask": mask, "inv": inv, "min_len": min_len, "ws": ws,
    }
    return out, cache


def gru_backward(cache, grad_out):
    hidden, embed = cache["hidden"], cache["embed"]
    t_max, batch, vocab = cache["t_max"], cache["batch"], cache["vocab"]
    wp = cache["wp"]
    hx_c, z_c = cache["hx"], cache["z"]
    mask, inv, min_len = cache["mask"], cache["inv"], cache["min_len"]
    ws: _Workspace = cache["ws"]

    sl_r = slice(0, hidden)
    sl_z = slice(hidden, 2 * hidden)
    sl_n = slice(2 * hidden, 3 * hidden)
    sl_q = slice(3 * hidden, 4 * hidden)

    wp_t = np.ascontiguousarray(wp.T)
    dwp = np.zeros_like(wp)
    dz = ws.buf("dz", (4 * hidden, batch))
    dhx = ws.buf("dhx", (wp.shape[1], batch))
    wscr = ws.buf("wscr", wp.shape)
    s = ws.buf("bs", (hidden, batch))
    s2 = ws.buf("bs2", (hidden, batch))
    hpass = ws.buf("hpass", (hidden, batch))
    dx = ws.buf("dx", (t_max, embed, batch))

    dh = np.ascontiguousarray(grad_out.T)

    for t in range(t_max - 1, -1, -1):
        z = z_c[t]
        h_prev = hx_c[t][:hidden]
        masked = t >= min_len
        if masked:
            np.multiply(dh, inv[t], out=hpass)
            dh *= mask[t]
        # h' = n + z * (h_prev - n)
        np.subtract(h_prev, z[sl_n], out=s)
        np.multiply(dh, s, out=dz[sl_z])          # d z-gate
        np.multiply(dh, z[sl_z], out=s)           # part of dh_prev
        np.subtract(1.0, z[sl_z], out=s2)
        s2 *= dh                                   # dn
        # n = tanh(a + r*q)
        np.multiply(z[sl_n], z[sl_n], out=dz[sl_n])
        np.subtract(1.0, dz[sl_n], out=dz[sl_n])
        dz[sl_n] *= s2                             # dnpre (= da)
        np.multiply(dz[sl_n], z[sl_r], out=dz[sl_q])   # dq
        np.multiply(dz[sl_n], z[sl_q], out=dz[sl_r])   # dr
        # sigmoid derivatives for r and z rows
        np.multiply(z[sl_r], z[sl_r], out=s2)
        np.subtract(z[sl_r], s2, out=s2)
        dz[sl_r] *= s2
        np.multiply(z[sl_z], z[sl_z], out=s2)
        np.subtract(z[sl_z], s2, out=s2)
        dz[sl_z] *= s2
        np.dot(dz, hx_c[t].T, out=wscr)
        dwp += wscr
        np.dot(wp_t, dz, out=dhx)
        dh[:] = dhx[:hidden]
        dh += s
        if masked:
            dh += hpass
        dx[t] = dhx[hidden:-1]

    tok_nat = cache["tokens"].T.ravel()
    d_table = np.empty((vocab, embed))
    for e in range(embed):
        d_table[:, e] = np.bincount(tok_nat, weights=dx[:, e, :].ravel(), minlength=vocab)
    dwx, dwh, dbx, dbh = _unpack_gru_grads(dwp, hidden, embed)
    return d_table, dwx, dwh, dbx, dbh
