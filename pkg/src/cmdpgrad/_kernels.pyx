# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot loops: chain simulation and phantom bookkeeping.

Mirrors ``_pykernels`` operation for operation; see that module for the
semantics of every argument.
"""
cimport cython


cdef inline Py_ssize_t _bisect_right(const double[:] a, double u,
                                     Py_ssize_t lo, Py_ssize_t hi) noexcept nogil:
    cdef Py_ssize_t mid
    while lo < hi:
        mid = (lo + hi) // 2
        if u < a[mid]:
            hi = mid
        else:
            lo = mid + 1
    return lo


def simulate(Py_ssize_t x0, const double[:] u_act, const double[:] u_tr,
             const double[:, :] action_cdf, const long[:] action_counts,
             const long[:] pair_offsets, const double[:, :] trans_cdf,
             long[:] states, long[:] actions):
    cdef Py_ssize_t n = u_act.shape[0]
    cdef Py_ssize_t num_states = action_counts.shape[0]
    cdef Py_ssize_t x = x0, k, a, cnt, nxt
    with nogil:
        for k in range(n):
            cnt = action_counts[x]
            a = _bisect_right(action_cdf[x], u_act[k], 0, cnt)
            if a > cnt - 1:
                a = cnt - 1
            states[k] = x
            actions[k] = a
            nxt = _bisect_right(trans_cdf[pair_offsets[x] + a], u_tr[k], 0, num_states)
            if nxt > num_states - 1:
                nxt = num_states - 1
            x = nxt
    return x


def wd_process(const long[:] states, const long[:] actions, const double[:, :] F,
               const long[:] pair_offsets, const long[:] comp_offsets,
               const long[:] comp_of_pair, const double[:] k_of_pair,
               const double[:, :] phantom_cdf, const long[:] action_counts,
               const double[:] phantom_u, bint spawn, long t0,
               double[:, :] ksum, double[:, :] kksum, long[:] count,
               long[:] max_count, double[:, :] est, double[:] vdeath, double[:] cum,
               long[:] rec_pair, long[:] rec_target, long[:] rec_birth,
               long[:] rec_death, double[:] rec_k, long[:] head, long[:] nxt,
               long rec_n):
    cdef Py_ssize_t n = states.shape[0]
    cdef Py_ssize_t n_obj = F.shape[0]
    cdef bint recording = rec_target.shape[0] > 0
    cdef Py_ssize_t j, o, q, x, z, c0, nloc, comp, na, ut, t
    cdef long tnow, p
    cdef double kq, kf
    with nogil:
        for j in range(n):
            x = states[j]
            z = pair_offsets[x] + actions[j]
            tnow = t0 + j
            for o in range(n_obj):
                cum[o] += F[o, z]
            if count[z] > 0:
                c0 = comp_offsets[x]
                nloc = comp_offsets[x + 1] - c0
                for q in range(nloc):
                    kq = ksum[z, q]
                    if kq != 0.0:
                        for o in range(n_obj):
                            est[o, c0 + q] += kq * cum[o]
                        vdeath[c0 + q] += (<double>tnow) * kq - kksum[z, q]
                    ksum[z, q] = 0.0
                    kksum[z, q] = 0.0
                count[z] = 0
                if recording:
                    p = head[z]
                    while p >= 0:
                        rec_death[p] = tnow
                        p = nxt[p]
                    head[z] = -1
            if spawn:
                comp = comp_of_pair[z]
                kf = k_of_pair[z]
                if comp >= 0 and kf != 0.0:
                    na = action_counts[x]
                    ut = _bisect_right(phantom_cdf[z], phantom_u[j], 0, na)
                    if ut > na - 1:
                        ut = na - 1
                    t = pair_offsets[x] + ut
                    q = comp - comp_offsets[x]
                    ksum[t, q] += kf
                    kksum[t, q] += kf * (<double>tnow)
                    count[t] += 1
                    if count[t] > max_count[t]:
                        max_count[t] = count[t]
                    for o in range(n_obj):
                        est[o, comp] += kf * (F[o, z] - F[o, t] - cum[o])
                    if recording:
                        rec_pair[rec_n] = z
                        rec_target[rec_n] = t
                        rec_birth[rec_n] = tnow
                        rec_death[rec_n] = -1
                        rec_k[rec_n] = kf
                        nxt[rec_n] = head[t]
                        head[t] = rec_n
                        rec_n += 1
    return rec_n
