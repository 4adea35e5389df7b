"""Pure-NumPy GRU recurrence kernels (fallback for the compiled extension).

Arrays are time-major. Layout conventions shared with ``_gru_ext.pyx``:

* ``xproj`` (T, B, 3H): input projections ``U x + b`` for the update, reset
  and candidate blocks, in that order.
* ``w_hh`` (3H, H): the stacked recurrent matrices ``[W_u; W_r; W_h]``.
* ``gates`` (T, B, 3H): update gate, reset gate and candidate state.
* ``hn`` (T, B, H): ``W_h h_{t-1}``, needed to differentiate the reset gate.
"""

import numpy as np


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def gru_forward(xproj, w_hh, h0):
    t_len, b, h3 = xproj.shape
    h = h3 // 3
    hs = np.empty((t_len, b, h))
    gates = np.empty((t_len, b, h3))
    hn = np.empty((t_len, b, h))
    prev = h0
    for t in range(t_len):
        rec = prev @ w_hh.T
        xp = xproj[t]
        u = _sigmoid(rec[:, :h] + xp[:, :h])
        r = _sigmoid(rec[:, h : 2 * h] + xp[:, h : 2 * h])
        n = rec[:, 2 * h :]
        cand = np.tanh(r * n + xp[:, 2 * h :])
        hs[t] = u * prev + (1.0 - u) * cand
        gates[t, :, :h] = u
        gates[t, :, h : 2 * h] = r
        gates[t, :, 2 * h :] = cand
        hn[t] = n
        prev = hs[t]
    return hs, gates, hn


def gru_backward(dhs, hs, h0, gates, hn, w_hh):
    """Backpropagate through time.

    ``dhs`` holds dL/dh_t arriving from above for every step. Returns
    ``(dxproj, dhid, dh0)`` where ``dxproj`` is dL/d(xproj) and ``dhid`` holds
    the gradients of the recurrent pre-activations ``[W_u a, W_r a, W_h a]``.
    """
    t_len, b, h = hs.shape
    dxproj = np.empty((t_len, b, 3 * h))
    dhid = np.empty((t_len, b, 3 * h))
    carry = np.zeros((b, h))
    for t in range(t_len - 1, -1, -1):
        prev = hs[t - 1] if t > 0 else h0
        u = gates[t, :, :h]
        r = gates[t, :, h : 2 * h]
        cand = gates[t, :, 2 * h :]
        dh = dhs[t] + carry
        dpre_c = dh * (1.0 - u) * (1.0 - cand * cand)
        dpre_r = dpre_c * hn[t] * r * (1.0 - r)
        dpre_u = dh * (prev - cand) * u * (1.0 - u)
        dxproj[t, :, :h] = dpre_u
        dxproj[t, :, h : 2 * h] = dpre_r
        dxproj[t, :, 2 * h :] = dpre_c
        dhid[t, :, :h] = dpre_u
        dhid[t, :, h : 2 * h] = dpre_r
        dhid[t, :, 2 * h :] = dpre_c * r
        carry = dh * u + dhid[t] @ w_hh
    return dxproj, dhid, carry
