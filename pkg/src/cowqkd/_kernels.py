"""Compiled inner loop of the detector model."""

import math

import numpy as np
from numba import njit

GUIDE_SIZE = 1024

# kernel exit reasons
DONE = 0
OUT_FULL = 1
NEED_EXP = 2
NEED_UNIFORM = 3
NEED_NORMAL = 4


@njit(cache=True, nogil=True)
def _first_above(cum, x):
    # smallest j with cum[j + 1] > x, or len(cum) - 2 if none
    lo, hi = 0, cum.size - 2
    while lo < hi:
        mid = (lo + hi) // 2
        if cum[mid + 1] > x:
            hi = mid
        else:
            lo = mid + 1
    return lo


@njit(cache=True, nogil=True)
def guide_table(cum):
    total = cum[cum.size - 1]
    guide = np.empty(GUIDE_SIZE, dtype=np.int64)
    for q in range(GUIDE_SIZE):
        guide[q] = _first_above(cum, q * total / GUIDE_SIZE)
    return guide


@njit(cache=True, nogil=True)
def detector_clicks(cum, guide, dark_frac, delay_slots, slot_ps, end_slot, dead_ps, sigma_ps,
                    state, exps, unifs, normals, cursor, out):
    """Draw the accepted clicks of one detector up to ``end_slot``.

    Slot ``s`` carries pattern position ``(s - delay_slots) % P`` whose click
    hazard is ``cum[p + 1] - cum[p]``. Slots are independent, so the next
    click lies where the cumulative hazard from the current slot first
    exceeds an Exp(1) draw. A click is dark (uniform inside the slot) with
    probability ``dark_frac[p]``, otherwise it sits at the slot centre plus
    Gaussian jitter clamped to the slot. Clicks before ``live_until`` are
    lost to dead time, which they do not extend.

    ``state`` = [next_slot, live_until, pending_slot] is updated in place;
    a drawn click beyond ``end_slot`` is kept as pending for the next call,
    so the realisation does not depend on how the time axis is chunked.
    ``cursor`` = read positions in ``exps``, ``unifs``, ``normals``.
    Returns ``(n_written, reason)``.
    """
    period = cum.size - 1
    total = cum[period]
    g = state[0]
    live_until = state[1]
    pending = state[2]
    ie, iu, inn = cursor[0], cursor[1], cursor[2]
    half = slot_ps // 2
    n = 0
    reason = DONE
    if total <= 0.0:
        state[0] = end_slot
        return 0, DONE
    while True:
        if pending >= 0:
            s = pending
        else:
            if ie == exps.size:
                reason = NEED_EXP
                break
            p0 = (g - delay_slots) % period
            target = cum[p0] + exps[ie]
            ie += 1
            base = g - p0
            if target >= total:
                k = math.floor(target / total)
                rem = target - k * total
                if rem >= total:
                    k += 1
                    rem -= total
                if rem < 0.0:
                    rem = 0.0
                base += np.int64(k) * period
            else:
                rem = target
            j = guide[min(np.int64(rem / total * GUIDE_SIZE), GUIDE_SIZE - 1)]
            while j < period - 1 and cum[j + 1] <= rem:
                j += 1
            s = base + j
            if s < g:
                s = g
            pending = s
        if s >= end_slot:
            g = end_slot if g < end_slot else g
            break
        if n == out.size:
            reason = OUT_FULL
            break
        j = (s - delay_slots) % period
        df = dark_frac[j]
        if df > 0.0:
            if iu == unifs.size:
                reason = NEED_UNIFORM
                break
            is_dark = unifs[iu] < df
        else:
            is_dark = False
        if is_dark:
            if iu + 1 >= unifs.size:
                reason = NEED_UNIFORM
                break
            off = np.int64(unifs[iu + 1] * slot_ps)
            iu += 2
        else:
            if inn == normals.size:
                reason = NEED_NORMAL
                break
            if df > 0.0:
                iu += 1
            off = half + np.int64(round(normals[inn] * sigma_ps))
            inn += 1
            if off < 0:
                off = 0
            elif off >= slot_ps:
                off = slot_ps - 1
        pending = -1
        t = s * slot_ps + off
        if t >= live_until:
            out[n] = t
            n += 1
            live_until = t + dead_ps
            nxt = live_until // slot_ps
            g = s + 1 if nxt <= s else nxt
        else:
            g = s + 1
    state[0] = g
    state[1] = live_until
    state[2] = pending
    cursor[0], cursor[1], cursor[2] = ie, iu, inn
    return n, reason


@njit(cache=True, nogil=True)
def merge_two(ka, ia, kb, ib):
    """Stable two-pointer merge of sorted keys with their payload indices (a wins ties).

    Keys must be below the int64 maximum, which serves as an end sentinel and
    keeps the inner loop free of bounds branches.
    """
    na, nb = ka.size, kb.size
    big = np.iinfo(np.int64).max
    a = np.empty(na + 1, dtype=np.int64)
    b = np.empty(nb + 1, dtype=np.int64)
    a[:na] = ka
    b[:nb] = kb
    a[na] = big
    b[nb] = big
    key = np.empty(na + nb, dtype=np.int64)
    idx = np.empty(na + nb, dtype=np.int64)
    i = j = 0
    for o in range(na + nb):
        x, y = a[i], b[j]
        take_a = x <= y and i < na
        key[o] = x if take_a else y
        idx[o] = ia[min(i, na - 1)] if take_a else ib[min(j, nb - 1)]
        i += take_a
        j += not take_a
    return key, idx
