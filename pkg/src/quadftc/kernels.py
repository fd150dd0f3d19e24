"""Hot numeric kernels: batched RK4 rigid-body stepping, observation, reward, status.

Each kernel exists twice: a scalar-loop numba version (``*_nb``) and a
vectorized numpy version (``*_np``).  The public names resolve to one of them
according to :mod:`quadftc._backend`.

Array layouts (float64 unless noted):

state (N, 17)
    position 0:3, velocity 3:6, quaternion w,x,y,z 6:10, body rates 10:13,
    rotor speeds 13:17
params (N, 10)
    mass, Ixx, Iyy, Izz, arm_length, k_f, k_m, motor_time_const,
    max_rotor_speed, gravity
"""

import math

import numpy as np

from quadftc._backend import USE_NUMBA, njit

STATE_DIM = 17
PARAM_DIM = 10
OBS_DIM = 22

P_MASS, P_IXX, P_IYY, P_IZZ, P_ARM, P_KF, P_KM, P_TAU, P_WMAX, P_G = range(10)

RUNNING, CRASH_TILT, CRASH_OOB, CRASH_NONFINITE, TIME_LIMIT = 0, 1, 2, 3, 4

SQRT1_2 = 1.0 / math.sqrt(2.0)


# ---------------------------------------------------------------------------
# numba versions
# ---------------------------------------------------------------------------


@njit(cache=True)
def _deriv_nb(s, u, eff, p, out):
    m = p[P_MASS]
    ixx = p[P_IXX]
    iyy = p[P_IYY]
    izz = p[P_IZZ]
    d = p[P_ARM] * SQRT1_2
    kf = p[P_KF]
    km = p[P_KM]

    f1 = eff[0] * kf * s[13] * s[13]
    f2 = eff[1] * kf * s[14] * s[14]
    f3 = eff[2] * kf * s[15] * s[15]
    f4 = eff[3] * kf * s[16] * s[16]
    q1 = eff[0] * km * s[13] * s[13]
    q2 = eff[1] * km * s[14] * s[14]
    q3 = eff[2] * km * s[15] * s[15]
    q4 = eff[3] * km * s[16] * s[16]

    collective = f1 + f2 + f3 + f4
    tx = d * (-f1 + f2 + f3 - f4)
    ty = d * (-f1 + f2 - f3 + f4)
    tz = -q1 - q2 + q3 + q4

    qw = s[6]
    qx = s[7]
    qy = s[8]
    qz = s[9]
    # third column of the body->world rotation
    bzx = 2.0 * (qx * qz + qw * qy)
    bzy = 2.0 * (qy * qz - qw * qx)
    bzz = 1.0 - 2.0 * (qx * qx + qy * qy)

    a = collective / m
    out[0] = s[3]
    out[1] = s[4]
    out[2] = s[5]
    out[3] = bzx * a
    out[4] = bzy * a
    out[5] = bzz * a - p[P_G]

    wx = s[10]
    wy = s[11]
    wz = s[12]
    out[6] = 0.5 * (-qx * wx - qy * wy - qz * wz)
    out[7] = 0.5 * (qw * wx + qy * wz - qz * wy)
    out[8] = 0.5 * (qw * wy - qx * wz + qz * wx)
    out[9] = 0.5 * (qw * wz + qx * wy - qy * wx)

    out[10] = (tx - (wy * izz * wz - wz * iyy * wy)) / ixx
    out[11] = (ty - (wz * ixx * wx - wx * izz * wz)) / iyy
    out[12] = (tz - (wx * iyy * wy - wy * ixx * wx)) / izz

    wmax = p[P_WMAX]
    tau = p[P_TAU]
    for i in range(4):
        out[13 + i] = (u[i] * wmax - s[13 + i]) / tau


@njit(cache=True)
def _rk4_one_nb(s, u, eff, p, dt, out):
    k1 = np.empty(STATE_DIM)
    k2 = np.empty(STATE_DIM)
    k3 = np.empty(STATE_DIM)
    k4 = np.empty(STATE_DIM)
    tmp = np.empty(STATE_DIM)
    _deriv_nb(s, u, eff, p, k1)
    for j in range(STATE_DIM):
        tmp[j] = s[j] + 0.5 * dt * k1[j]
    _deriv_nb(tmp, u, eff, p, k2)
    for j in range(STATE_DIM):
        tmp[j] = s[j] + 0.5 * dt * k2[j]
    _deriv_nb(tmp, u, eff, p, k3)
    for j in range(STATE_DIM):
        tmp[j] = s[j] + dt * k3[j]
    _deriv_nb(tmp, u, eff, p, k4)
    for j in range(STATE_DIM):
        out[j] = s[j] + dt / 6.0 * (k1[j] + 2.0 * k2[j] + 2.0 * k3[j] + k4[j])
    n = math.sqrt(out[6] * out[6] + out[7] * out[7] + out[8] * out[8] + out[9] * out[9])
    for j in range(6, 10):
        out[j] = out[j] / n
    wmax = p[P_WMAX]
    for j in range(13, 17):
        if out[j] < 0.0:
            out[j] = 0.0
        elif out[j] > wmax:
            out[j] = wmax


@njit(cache=True)
def step_batch_nb(states, cmds, eta, onset, params, step_idx, dt, nsub):
    """Advance every row of ``states`` by ``nsub`` RK4 steps of size ``dt``.

    The effectiveness for a physics step starting at ``t = step_idx * dt`` is
    ``eta`` when ``t >= onset`` and one otherwise (zero-order hold per step).
    Returns the new states and a per-row non-finite flag.
    """
    n = states.shape[0]
    out = states.copy()
    bad = np.zeros(n, dtype=np.bool_)
    u = np.empty(4)
    eff = np.empty(4)
    cur = np.empty(STATE_DIM)
    for i in range(n):
        for j in range(4):
            c = cmds[i, j]
            if c < 0.0:
                c = 0.0
            elif c > 1.0:
                c = 1.0
            u[j] = c
        for j in range(STATE_DIM):
            cur[j] = states[i, j]
        for k in range(nsub):
            t = (step_idx[i] + k) * dt
            for j in range(4):
                eff[j] = eta[i, j] if t >= onset[i] else 1.0
            _rk4_one_nb(cur, u, eff, params[i], dt, out[i])
            finite = True
            for j in range(STATE_DIM):
                if not math.isfinite(out[i, j]):
                    finite = False
            if not finite:
                bad[i] = True
                break
            for j in range(STATE_DIM):
                cur[j] = out[i, j]
    return out, bad


@njit(cache=True)
def observe_batch_nb(states, targets, next_dir, prev_action, pos_clip, rate_clip):
    n = states.shape[0]
    obs = np.empty((n, OBS_DIM), dtype=np.float32)
    for i in range(n):
        s = states[i]
        for j in range(3):
            e = targets[i, j] - s[j]
            if e > pos_clip:
                e = pos_clip
            elif e < -pos_clip:
                e = -pos_clip
            obs[i, j] = e
            obs[i, 3 + j] = s[3 + j]
        qw = s[6]
        qx = s[7]
        qy = s[8]
        qz = s[9]
        # first two columns of the rotation matrix, column-major
        obs[i, 6] = 1.0 - 2.0 * (qy * qy + qz * qz)
        obs[i, 7] = 2.0 * (qx * qy + qw * qz)
        obs[i, 8] = 2.0 * (qx * qz - qw * qy)
        obs[i, 9] = 2.0 * (qx * qy - qw * qz)
        obs[i, 10] = 1.0 - 2.0 * (qx * qx + qz * qz)
        obs[i, 11] = 2.0 * (qy * qz + qw * qx)
        for j in range(3):
            w = s[10 + j]
            if w > rate_clip:
                w = rate_clip
            elif w < -rate_clip:
                w = -rate_clip
            obs[i, 12 + j] = w
        for j in range(4):
            obs[i, 15 + j] = prev_action[i, j]
        for j in range(3):
            obs[i, 19 + j] = next_dir[i, j]
    return obs


@njit(cache=True)
def reward_batch_nb(states, actions, prev_actions, targets, weights, crashed):
    """weights = (w_p, w_v, w_omega, w_a, crash_penalty)."""
    n = states.shape[0]
    r = np.empty(n)
    for i in range(n):
        s = states[i]
        ep = 0.0
        ev = 0.0
        ew = 0.0
        for j in range(3):
            e = s[j] - targets[i, j]
            ep += e * e
            ev += s[3 + j] * s[3 + j]
            ew += s[10 + j] * s[10 + j]
        ea = 0.0
        for j in range(4):
            e = actions[i, j] - prev_actions[i, j]
            ea += e * e
        ri = (
            1.0
            - weights[0] * math.sqrt(ep)
            - weights[1] * math.sqrt(ev)
            - weights[2] * math.sqrt(ew)
            - weights[3] * math.sqrt(ea)
        )
        if crashed[i]:
            ri -= weights[4]
        r[i] = ri
    return r


@njit(cache=True)
def status_batch_nb(states, targets, t, episode_length, pos_bound, nonfinite):
    n = states.shape[0]
    out = np.zeros(n, dtype=np.int64)
    for i in range(n):
        s = states[i]
        if nonfinite[i]:
            out[i] = CRASH_NONFINITE
            continue
        finite = True
        for j in range(STATE_DIM):
            if not math.isfinite(s[j]):
                finite = False
        if not finite:
            out[i] = CRASH_NONFINITE
            continue
        bzz = 1.0 - 2.0 * (s[7] * s[7] + s[8] * s[8])
        if bzz < 0.0:
            out[i] = CRASH_TILT
            continue
        dist = 0.0
        for j in range(3):
            e = s[j] - targets[i, j]
            dist += e * e
        if math.sqrt(dist) > pos_bound or s[2] < 0.0:
            out[i] = CRASH_OOB
            continue
        if t[i] >= episode_length:
            out[i] = TIME_LIMIT
    return out


@njit(cache=True)
def gae_nb(rewards, values, dones, last_values, gamma, lam):
    """GAE over a (T, N) rollout; ``values`` are V(s_t), ``last_values`` V(s_T)."""
    T, n = rewards.shape
    adv = np.zeros((T, n))
    for i in range(n):
        last = 0.0
        for t in range(T - 1, -1, -1):
            if t == T - 1:
                nv = last_values[i]
            else:
                nv = values[t + 1, i]
            nonterm = 1.0 - dones[t, i]
            delta = rewards[t, i] + gamma * nv * nonterm - values[t, i]
            last = delta + gamma * lam * nonterm * last
            adv[t, i] = last
    return adv


# ---------------------------------------------------------------------------
# numpy versions (vectorized over rows, same arithmetic order)
# ---------------------------------------------------------------------------


def _deriv_np(s, u, eff, p):
    m = p[:, P_MASS]
    ixx = p[:, P_IXX]
    iyy = p[:, P_IYY]
    izz = p[:, P_IZZ]
    d = p[:, P_ARM] * SQRT1_2
    kf = p[:, P_KF]
    km = p[:, P_KM]
    f = eff * kf[:, None] * s[:, 13:17] * s[:, 13:17]
    q = eff * km[:, None] * s[:, 13:17] * s[:, 13:17]
    f1, f2, f3, f4 = f[:, 0], f[:, 1], f[:, 2], f[:, 3]
    collective = f1 + f2 + f3 + f4
    tx = d * (-f1 + f2 + f3 - f4)
    ty = d * (-f1 + f2 - f3 + f4)
    tz = -q[:, 0] - q[:, 1] + q[:, 2] + q[:, 3]

    qw, qx, qy, qz = s[:, 6], s[:, 7], s[:, 8], s[:, 9]
    bzx = 2.0 * (qx * qz + qw * qy)
    bzy = 2.0 * (qy * qz - qw * qx)
    bzz = 1.0 - 2.0 * (qx * qx + qy * qy)

    out = np.empty_like(s)
    a = collective / m
    out[:, 0:3] = s[:, 3:6]
    out[:, 3] = bzx * a
    out[:, 4] = bzy * a
    out[:, 5] = bzz * a - p[:, P_G]

    wx, wy, wz = s[:, 10], s[:, 11], s[:, 12]
    out[:, 6] = 0.5 * (-qx * wx - qy * wy - qz * wz)
    out[:, 7] = 0.5 * (qw * wx + qy * wz - qz * wy)
    out[:, 8] = 0.5 * (qw * wy - qx * wz + qz * wx)
    out[:, 9] = 0.5 * (qw * wz + qx * wy - qy * wx)

    out[:, 10] = (tx - (wy * izz * wz - wz * iyy * wy)) / ixx
    out[:, 11] = (ty - (wz * ixx * wx - wx * izz * wz)) / iyy
    out[:, 12] = (tz - (wx * iyy * wy - wy * ixx * wx)) / izz

    out[:, 13:17] = (u * p[:, P_WMAX, None] - s[:, 13:17]) / p[:, P_TAU, None]
    return out


def _rk4_np(s, u, eff, p, dt):
    k1 = _deriv_np(s, u, eff, p)
    k2 = _deriv_np(s + 0.5 * dt * k1, u, eff, p)
    k3 = _deriv_np(s + 0.5 * dt * k2, u, eff, p)
    k4 = _deriv_np(s + dt * k3, u, eff, p)
    out = s + dt / 6.0 * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    q = out[:, 6:10]
    n = np.sqrt(q[:, 0] * q[:, 0] + q[:, 1] * q[:, 1] + q[:, 2] * q[:, 2] + q[:, 3] * q[:, 3])
    out[:, 6:10] = q / n[:, None]
    out[:, 13:17] = np.minimum(np.maximum(out[:, 13:17], 0.0), p[:, P_WMAX, None])
    return out


def step_batch_np(states, cmds, eta, onset, params, step_idx, dt, nsub):
    u = np.clip(cmds, 0.0, 1.0).astype(np.float64)
    cur = np.array(states, dtype=np.float64, copy=True)
    out = cur.copy()
    bad = np.zeros(cur.shape[0], dtype=bool)
    alive = np.ones(cur.shape[0], dtype=bool)
    with np.errstate(all="ignore"):
        for k in range(nsub):
            t = (step_idx + k) * dt
            eff = np.where((t >= onset)[:, None], eta, 1.0)
            nxt = _rk4_np(cur, u, eff, params, dt)
            fin = np.isfinite(nxt).all(axis=1)
            upd = alive
            out[upd] = nxt[upd]
            newly_bad = alive & ~fin
            bad |= newly_bad
            alive = alive & fin
            cur = np.where(alive[:, None], nxt, cur)
    return out, bad


def observe_batch_np(states, targets, next_dir, prev_action, pos_clip, rate_clip):
    s = states
    obs = np.empty((s.shape[0], OBS_DIM), dtype=np.float32)
    obs[:, 0:3] = np.clip(targets - s[:, 0:3], -pos_clip, pos_clip)
    obs[:, 3:6] = s[:, 3:6]
    qw, qx, qy, qz = s[:, 6], s[:, 7], s[:, 8], s[:, 9]
    obs[:, 6] = 1.0 - 2.0 * (qy * qy + qz * qz)
    obs[:, 7] = 2.0 * (qx * qy + qw * qz)
    obs[:, 8] = 2.0 * (qx * qz - qw * qy)
    obs[:, 9] = 2.0 * (qx * qy - qw * qz)
    obs[:, 10] = 1.0 - 2.0 * (qx * qx + qz * qz)
    obs[:, 11] = 2.0 * (qy * qz + qw * qx)
    obs[:, 12:15] = np.clip(s[:, 10:13], -rate_clip, rate_clip)
    obs[:, 15:19] = prev_action
    obs[:, 19:22] = next_dir
    return obs


def reward_batch_np(states, actions, prev_actions, targets, weights, crashed):
    e = states[:, 0:3] - targets
    v = states[:, 3:6]
    w = states[:, 10:13]
    da = np.asarray(actions, dtype=np.float64) - prev_actions
    ep = e[:, 0] * e[:, 0] + e[:, 1] * e[:, 1] + e[:, 2] * e[:, 2]
    ev = v[:, 0] * v[:, 0] + v[:, 1] * v[:, 1] + v[:, 2] * v[:, 2]
    ew = w[:, 0] * w[:, 0] + w[:, 1] * w[:, 1] + w[:, 2] * w[:, 2]
    ea = da[:, 0] * da[:, 0] + da[:, 1] * da[:, 1] + da[:, 2] * da[:, 2] + da[:, 3] * da[:, 3]
    r = (
        1.0
        - weights[0] * np.sqrt(ep)
        - weights[1] * np.sqrt(ev)
        - weights[2] * np.sqrt(ew)
        - weights[3] * np.sqrt(ea)
    )
    return np.where(crashed, r - weights[4], r)


def status_batch_np(states, targets, t, episode_length, pos_bound, nonfinite):
    s = states
    out = np.zeros(s.shape[0], dtype=np.int64)
    with np.errstate(invalid="ignore"):
        bzz = 1.0 - 2.0 * (s[:, 7] * s[:, 7] + s[:, 8] * s[:, 8])
        e = s[:, 0:3] - targets
        dist = np.sqrt(e[:, 0] * e[:, 0] + e[:, 1] * e[:, 1] + e[:, 2] * e[:, 2])
        fin = np.isfinite(s).all(axis=1) & ~nonfinite
        out[t >= episode_length] = TIME_LIMIT
        out[(dist > pos_bound) | (s[:, 2] < 0.0)] = CRASH_OOB
        out[bzz < 0.0] = CRASH_TILT
    out[~fin] = CRASH_NONFINITE
    return out


def gae_np(rewards, values, dones, last_values, gamma, lam):
    T = rewards.shape[0]
    adv = np.zeros(rewards.shape)
    last = np.zeros(rewards.shape[1])
    for t in range(T - 1, -1, -1):
        nv = last_values if t == T - 1 else values[t + 1]
        nonterm = 1.0 - dones[t]
        delta = rewards[t] + gamma * nv * nonterm - values[t]
        last = delta + gamma * lam * nonterm * last
        adv[t] = last
    return adv


if USE_NUMBA:
    step_batch = step_batch_nb
    observe_batch = observe_batch_nb
    reward_batch = reward_batch_nb
    status_batch = status_batch_nb
    gae_kernel = gae_nb
else:
    step_batch = step_batch_np
    observe_batch = observe_batch_np
    reward_batch = reward_batch_np
    status_batch = status_batch_np
    gae_kernel = gae_np
