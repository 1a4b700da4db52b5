"""Jitted inner loops for toppling, stabilization, and exploration.

All state lives in flat int64 arrays owned by the Python wrappers; kernels
mutate them in place and return status codes.  Site-state codes follow
model.py: 0 empty, -1 sleeping, n >= 1 active.
"""

import numpy as np
from numba import njit

from .rng import derive_seed, instruction_code, stream_next, stream_u01

# result codes for a single toppling
R_MOVED = 0
R_SLEPT = 1
R_KILLED = 2
R_SUPPRESSED = 3
R_OVERRUN = 4

# stabilize_core statuses
S_STABLE = 0
S_BUDGET = 1
S_OVERRUN = 4

# boundary codes (mirror model.py)
_B_TORUS = 0
_B_KILL = 1
_B_CLOSED = 2
_B_WINDOW = 3


@njit(cache=True)
def topple_flat(
    grid,
    counts,
    jcounts,
    inflow,
    f,
    shape,
    strides,
    boundary,
    offsets,
    seed,
    skeys,
    q,
    cumw,
    jumps_only,
    inf_sleep,
):
    """Consume the next instruction at flat site f.

    Returns (result code, target flat index or -1).  The caller has already
    checked the mode's precondition; the site must hold at least one particle.
    """
    j = counts[f] + 1
    code = instruction_code(seed, skeys[f], j, q, cumw, jumps_only)
    counts[f] += 1
    if code < 0:
        if grid[f] == 1:
            grid[f] = -1
        return R_SLEPT, -1
    jcounts[f] += 1
    d = shape.shape[0]
    rem = f
    t = 0
    outside = False
    for a in range(d):
        idx = rem // strides[a]
        rem = rem % strides[a]
        ti = idx + offsets[code, a]
        if ti < 0 or ti >= shape[a]:
            if boundary == _B_TORUS:
                ti = ti % shape[a]
            else:
                outside = True
                break
        t += ti * strides[a]
    if outside:
        if boundary == _B_KILL:
            v = grid[f]
            grid[f] = 0 if (v == 1 or v == -1) else v - 1
            if inf_sleep and grid[f] == 1:
                grid[f] = -1
            return R_KILLED, -1
        if boundary == _B_CLOSED:
            return R_SUPPRESSED, -1
        return R_OVERRUN, -1
    v = grid[f]
    grid[f] = 0 if (v == 1 or v == -1) else v - 1
    w = grid[t]
    if w == 0:
        grid[t] = 1
    elif w == -1:
        grid[t] = 2
    else:
        grid[t] = w + 1
    inflow[t] += 1
    if inf_sleep:
        if grid[f] == 1:
            grid[f] = -1
        if grid[t] == 1:
            grid[t] = -1
    return R_MOVED, t


@njit(cache=True)
def is_unstable(code, at_origin, mode):
    """Mode codes: 0 Legal, 1 Acceptable, 2 WLegal, 3 SLegal."""
    if mode == 0:
        return code >= 1
    if mode == 1:
        return code >= 1 or code == -1
    if mode == 2:
        if at_origin:
            return code >= 2
        return code >= 1
    if at_origin:
        return code >= 1 or code == -1
    return code >= 1


@njit(cache=True)
def stabilize_core(
    grid,
    counts,
    jcounts,
    inflow,
    vol,
    origin_flat,
    mode,
    strategy,
    strat_seed,
    budget,
    shape,
    strides,
    boundary,
    offsets,
    seed,
    skeys,
    q,
    cumw,
    jumps_only,
    inf_sleep,
):
    """Topple unstable volume sites per strategy until stable or out of budget.

    Strategy codes: 0 sweep low-to-high, 1 random unstable, 2 FIFO queue,
    3 exhaust site then next.  Returns (status, topples, exits).
    """
    topples = 0
    exits = 0
    m = vol.shape[0]

    if strategy == 2:
        cap = grid.shape[0] + 1
        qbuf = np.empty(cap, dtype=np.int64)
        inq = np.zeros(grid.shape[0], dtype=np.bool_)
        head = 0
        tail = 0
        for i in range(m):
            f = vol[i]
            if is_unstable(grid[f], f == origin_flat, mode):
                qbuf[tail] = f
                tail = (tail + 1) % cap
                inq[f] = True
        in_vol = np.zeros(grid.shape[0], dtype=np.bool_)
        for i in range(m):
            in_vol[vol[i]] = True
        while head != tail:
            f = qbuf[head]
            head = (head + 1) % cap
            inq[f] = False
            if not is_unstable(grid[f], f == origin_flat, mode):
                continue
            if topples >= budget:
                return S_BUDGET, topples, exits
            res, t = topple_flat(
                grid, counts, jcounts, inflow, f, shape, strides, boundary,
                offsets, seed, skeys, q, cumw, jumps_only, inf_sleep,
            )
            topples += 1
            if res == R_OVERRUN:
                return S_OVERRUN, topples, exits
            if res == R_KILLED:
                exits += 1
            if is_unstable(grid[f], f == origin_flat, mode) and not inq[f]:
                qbuf[tail] = f
                tail = (tail + 1) % cap
                inq[f] = True
            if t >= 0 and in_vol[t] and not inq[t]:
                if is_unstable(grid[t], t == origin_flat, mode):
                    qbuf[tail] = t
                    tail = (tail + 1) % cap
                    inq[t] = True
        return S_STABLE, topples, exits

    if strategy == 1:
        state = strat_seed
        unstable = np.empty(m, dtype=np.int64)
        while True:
            cnt = 0
            for i in range(m):
                f = vol[i]
                if is_unstable(grid[f], f == origin_flat, mode):
                    unstable[cnt] = f
                    cnt += 1
            if cnt == 0:
                return S_STABLE, topples, exits
            if topples >= budget:
                return S_BUDGET, topples, exits
            state, word = stream_next(state)
            f = unstable[np.int64(word % np.uint64(cnt))]
            res, t = topple_flat(
                grid, counts, jcounts, inflow, f, shape, strides, boundary,
                offsets, seed, skeys, q, cumw, jumps_only, inf_sleep,
            )
            topples += 1
            if res == R_OVERRUN:
                return S_OVERRUN, topples, exits
            if res == R_KILLED:
                exits += 1

    # strategies 0 (one toppling per unstable site per pass) and
    # 3 (exhaust each site before moving on): sweep passes in flat order
    while True:
        progressed = False
        for i in range(m):
            f = vol[i]
            while is_unstable(grid[f], f == origin_flat, mode):
                if topples >= budget:
                    return S_BUDGET, topples, exits
                res, t = topple_flat(
                    grid, counts, jcounts, inflow, f, shape, strides, boundary,
                    offsets, seed, skeys, q, cumw, jumps_only, inf_sleep,
                )
                topples += 1
                progressed = True
                if res == R_OVERRUN:
                    return S_OVERRUN, topples, exits
                if res == R_KILLED:
                    exits += 1
                if strategy == 0:
                    break
        if not progressed:
            return S_STABLE, topples, exits


@njit(cache=True)
def normalize_lone_actives(grid):
    """Infinite-sleep-rate invariant: any lone active particle falls asleep."""
    changed = 0
    for f in range(grid.shape[0]):
        if grid[f] == 1:
            grid[f] = -1
            changed += 1
    return changed


# exploration statuses
E_STOPPED = 0
E_BUDGET = 1
E_ESCAPED = 2


@njit(cache=True)
def explore_1d(start_idx, stop_idx, reveal, last_kind, prev_kind, path,
               seed, skeys, q, cumw, jumps_only):
    """Walk a would-be particle by revealing instructions, without toppling.

    Positions are array indices on a 1-d window.  A sleep instruction means
    stay; jumps move by +-1 (canonical codes 0 -> +1, 1 -> -1).  The walk
    ends on reaching stop_idx (nothing is revealed there), walking off the
    array, or exhausting the path buffer.  reveal/last_kind/prev_kind
    persist across calls so later walks continue each site's stack.

    Returns (status, steps); path[:steps] holds the reveal positions.
    """
    pos = start_idx
    steps = 0
    n = reveal.shape[0]
    budget = path.shape[0]
    while pos != stop_idx:
        if pos < 0 or pos >= n:
            return E_ESCAPED, steps
        if steps >= budget:
            return E_BUDGET, steps
        j = reveal[pos] + 1
        code = instruction_code(seed, skeys[pos], j, q, cumw, jumps_only)
        reveal[pos] += 1
        prev_kind[pos] = last_kind[pos]
        last_kind[pos] = code
        path[steps] = pos
        steps += 1
        if code == 0:
            pos += 1
        elif code == 1:
            pos -= 1
    return E_STOPPED, steps


@njit(cache=True)
def killed_walk_kernel(replicas, horizon, seed, qkill, cumw, vproj, early_margin):
    """Count replicas of a unit-rate walk killed while its v-projection is <= 0.

    Killing happens with probability qkill per step taken from the half-space
    (the chance the kill clock beats the jump clock).  A walk that survives
    the horizon, or drifts past early_margin, counts as never killed.
    """
    kills = 0
    last = cumw.shape[0] - 1
    for rep in range(replicas):
        state = derive_seed(seed, rep)
        proj = 0.0
        for _step in range(horizon):
            if proj <= 0.0:
                state, u = stream_u01(state)
                if u < qkill:
                    kills += 1
                    break
            elif early_margin > 0.0 and proj > early_margin:
                break
            state, u = stream_u01(state)
            k = 0
            while k < last and u >= cumw[k]:
                k += 1
            proj += vproj[k]
    return kills


@njit(cache=True)
def green_kernel(replicas, horizon, seed, cumw, offsets, visits_out):
    """Visits to the start (including time 0) of a horizon-truncated walk."""
    d = offsets.shape[1]
    last = cumw.shape[0] - 1
    for rep in range(replicas):
        state = derive_seed(seed, rep)
        pos = np.zeros(d, dtype=np.int64)
        v = 1
        for _step in range(horizon):
            state, u = stream_u01(state)
            k = 0
            while k < last and u >= cumw[k]:
                k += 1
            home = True
            for a in range(d):
                pos[a] += offsets[k, a]
                if pos[a] != 0:
                    home = False
            if home:
                v += 1
        visits_out[rep] = v


@njit(cache=True)
def urn_kernel(r, zeta2, seed):
    """Two-color destruction urn; returns (X, Z, k) at the stopping turn.

    Each turn samples a color with probability proportional to its count and
    destroys a Geometric(zeta2) number (support 1, 2, ...) of the opposite
    color; stops when a color is exhausted.
    """
    x = r
    z = r
    k = 0
    state = seed
    lp = np.log(1.0 - zeta2)
    while x > 0 and z > 0:
        k += 1
        state, u = stream_u01(state)
        pick_first = u * (x + z) < x
        state, u2 = stream_u01(state)
        y = np.int64(np.ceil(np.log(1.0 - u2) / lp))
        if y < 1:
            y = 1
        if pick_first:
            z -= y
        else:
            x -= y
    return x, z, k
