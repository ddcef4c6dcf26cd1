"""Pure-Python reference kernels.

Same signatures and the same floating-point operation order as the compiled
``_kernels`` extension, so both backends produce identical numbers for
identical inputs.  All array arguments are mutated in place where noted.
"""
from bisect import bisect_right


def simulate(x0, u_act, u_tr, action_cdf, action_counts, pair_offsets,
             trans_cdf, states, actions):
    """Simulate ``len(u_act)`` steps of the state-action chain from state ``x0``.

    Fills ``states`` and ``actions`` and returns the state that follows the
    last simulated step.
    """
    n = len(u_act)
    acdf = action_cdf.tolist()
    counts = action_counts.tolist()
    offs = pair_offsets.tolist()
    tcdf = trans_cdf.tolist()
    ua = u_act.tolist()
    ut = u_tr.tolist()
    num_states = len(counts)
    x = int(x0)
    xs = [0] * n
    acts = [0] * n
    for k in range(n):
        cnt = counts[x]
        a = bisect_right(acdf[x], ua[k], 0, cnt)
        if a > cnt - 1:
            a = cnt - 1
        xs[k] = x
        acts[k] = a
        nxt = bisect_right(tcdf[offs[x] + a], ut[k])
        if nxt > num_states - 1:
            nxt = num_states - 1
        x = nxt
    states[:] = xs
    actions[:] = acts
    return x


def wd_process(states, actions, F, pair_offsets, comp_offsets, comp_of_pair,
               k_of_pair, phantom_cdf, action_counts, phantom_u, spawn, t0,
               ksum, kksum, count, max_count, est, vdeath, cum,
               rec_pair, rec_target, rec_birth, rec_death, rec_k, head, nxt,
               rec_n):
    """Advance the phantom bookkeeping over one trajectory segment.

    Per step j (global time ``t0 + j``) with observed pair z:
      1. add F[:, z] to the batch-local running sums ``cum``;
      2. kill every phantom whose death target is z, crediting
         ``ksum * cum`` to ``est`` and ``K * lifetime`` to ``vdeath``;
      3. if ``spawn``, start one phantom from z (when z owns a component).

    Returns the updated number of recorded phantoms (``rec_n``).
    """
    n = len(states)
    n_obj = F.shape[0]
    Fl = F.tolist()
    offs = pair_offsets.tolist()
    coffs = comp_offsets.tolist()
    comp_l = comp_of_pair.tolist()
    k_l = k_of_pair.tolist()
    pcdf = phantom_cdf.tolist()
    counts_a = action_counts.tolist()
    xs = states.tolist()
    acts = actions.tolist()
    pu = phantom_u.tolist() if spawn else None
    max_local = ksum.shape[1]
    ks = ksum.tolist()
    kks = kksum.tolist()
    cnt = count.tolist()
    mxc = max_count.tolist()
    est_l = est.tolist()
    vd = vdeath.tolist()
    cm = cum.tolist()
    recording = rec_target.shape[0] > 0
    hd = head.tolist()
    for j in range(n):
        x = xs[j]
        z = offs[x] + acts[j]
        tnow = t0 + j
        for o in range(n_obj):
            cm[o] += Fl[o][z]
        if cnt[z] > 0:
            c0 = coffs[x]
            nloc = coffs[x + 1] - c0
            row_k = ks[z]
            row_kk = kks[z]
            for q in range(nloc):
                kq = row_k[q]
                if kq != 0.0:
                    for o in range(n_obj):
                        est_l[o][c0 + q] += kq * cm[o]
                    vd[c0 + q] += tnow * kq - row_kk[q]
                row_k[q] = 0.0
                row_kk[q] = 0.0
            cnt[z] = 0
            if recording:
                p = hd[z]
                while p >= 0:
                    rec_death[p] = tnow
                    p = int(nxt[p])
                hd[z] = -1
        if spawn:
            comp = comp_l[z]
            kf = k_l[z]
            if comp >= 0 and kf != 0.0:
                na = counts_a[x]
                ut = bisect_right(pcdf[z], pu[j], 0, na)
                if ut > na - 1:
                    ut = na - 1
                t = offs[x] + ut
                q = comp - coffs[x]
                ks[t][q] += kf
                kks[t][q] += kf * tnow
                cnt[t] += 1
                if cnt[t] > mxc[t]:
                    mxc[t] = cnt[t]
                for o in range(n_obj):
                    est_l[o][comp] += kf * (Fl[o][z] - Fl[o][t] - cm[o])
                if recording:
                    rec_pair[rec_n] = z
                    rec_target[rec_n] = t
                    rec_birth[rec_n] = tnow
                    rec_death[rec_n] = -1
                    rec_k[rec_n] = kf
                    nxt[rec_n] = hd[t]
                    hd[t] = rec_n
                    rec_n += 1
    if max_local:
        ksum[:, :] = ks
        kksum[:, :] = kks
    count[:] = cnt
    max_count[:] = mxc
    est[:, :] = est_l
    vdeath[:] = vd
    cum[:] = cm
    head[:] = hd
    return rec_n
