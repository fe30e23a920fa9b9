"""Compiled kernels for sparse min-cost transport.

Two exact solvers share one arc layout: a network simplex on a spanning tree
(the workhorse) and successive shortest augmenting paths with node
potentials (the Jonker-Volgenant idea generalised to weighted supplies),
kept as an independent cross-check.  A pruned scan for dual-infeasible pairs
certifies optimality on the complete bipartite graph.
"""

import numpy as np
from numba import njit


@njit(cache=True, inline="always")
def _push(hk, hv, size, key, val):
    i = size
    hk[i] = key
    hv[i] = val
    while i > 0:
        p = (i - 1) >> 1
        if hk[p] <= hk[i]:
            break
        hk[p], hk[i] = hk[i], hk[p]
        hv[p], hv[i] = hv[i], hv[p]
        i = p
    return size + 1


@njit(cache=True, inline="always")
def _pop(hk, hv, size):
    key = hk[0]
    val = hv[0]
    size -= 1
    hk[0] = hk[size]
    hv[0] = hv[size]
    i = 0
    while True:
        l = 2 * i + 1
        if l >= size:
            break
        c = l
        if l + 1 < size and hk[l + 1] < hk[l]:
            c = l + 1
        if hk[i] <= hk[c]:
            break
        hk[c], hk[i] = hk[i], hk[c]
        hv[c], hv[i] = hv[i], hv[c]
        i = c
    return key, val, size


@njit(cache=True)
def ssp_transport(n, m, supply, demand, out_ptr, out_tgt, cost, src_of, in_ptr, in_edge, mtol):
    """Min-cost flow from ``n`` sources to ``m`` sinks on a sparse arc list.

    Arcs are grouped by source (``out_ptr``); ``in_ptr/in_edge`` index the
    same arcs by sink.  Returns (flow per arc, potentials, augmentations,
    status) with status 1 when some supply cannot be routed.
    """
    N = n + m
    E = out_tgt.shape[0]
    flow = np.zeros(E)
    pot = np.zeros(N)
    excess = supply.copy()
    deficit = demand.copy()
    dist = np.zeros(N)
    seen = np.zeros(N, np.int64)
    done = np.zeros(N, np.int64)
    pred = np.full(N, -1, np.int64)
    popped = np.zeros(N, np.int64)
    cap = E + N + 8
    hk = np.empty(cap)
    hv = np.empty(cap, np.int64)
    it = 0
    for s in range(n):
        while excess[s] > mtol:
            it += 1
            hs = 0
            npop = 0
            dist[s] = 0.0
            seen[s] = it
            pred[s] = -1
            hs = _push(hk, hv, hs, 0.0, s)
            found = -1
            D = 0.0
            while hs > 0:
                d, v, hs = _pop(hk, hv, hs)
                if done[v] == it or d > dist[v]:
                    continue
                done[v] = it
                popped[npop] = v
                npop += 1
                if v >= n:
                    j = v - n
                    if deficit[j] > mtol:
                        found = v
                        D = d
                        break
                    for q in range(in_ptr[j], in_ptr[j + 1]):
                        e = in_edge[q]
                        if flow[e] > 0.0:
                            w = src_of[e]
                            if done[w] == it:
                                continue
                            rc = pot[v] - pot[w] - cost[e]
                            if rc < 0.0:
                                rc = 0.0
                            nd = d + rc
                            if seen[w] != it or nd < dist[w]:
                                seen[w] = it
                                dist[w] = nd
                                pred[w] = e
                                hs = _push(hk, hv, hs, nd, w)
                else:
                    for e in range(out_ptr[v], out_ptr[v + 1]):
                        w = n + out_tgt[e]
                        if done[w] == it:
                            continue
                        rc = cost[e] + pot[v] - pot[w]
                        if rc < 0.0:
                            rc = 0.0
                        nd = d + rc
                        if seen[w] != it or nd < dist[w]:
                            seen[w] = it
                            dist[w] = nd
                            pred[w] = e
                            hs = _push(hk, hv, hs, nd, w)
            if found < 0:
                return flow, pot, it, 1
            for q in range(npop):
                v = popped[q]
                pot[v] += dist[v] - D
            delta = min(excess[s], deficit[found - n])
            v = found
            while v != s:
                e = pred[v]
                if v >= n:
                    v = src_of[e]
                else:
                    if flow[e] < delta:
                        delta = flow[e]
                    v = n + out_tgt[e]
            v = found
            while v != s:
                e = pred[v]
                if v >= n:
                    flow[e] += delta
                    v = src_of[e]
                else:
                    flow[e] -= delta
                    if flow[e] <= mtol:
                        flow[e] = 0.0
                    v = n + out_tgt[e]
            excess[s] -= delta
            deficit[found - n] -= delta
    return flow, pot, it, 0


@njit(cache=True)
def scan_violations(xs, ys, pu, pv, tol, bptr, bitems, bbox, bmax, max_out):
    """Pairs (i, j) with |x_i - y_j|^2 + pu_i - pv_j < -tol.

    Sinks are grouped in spatial buckets; a bucket is skipped when the
    distance to its bounding box already certifies every pair inside it.
    Returns (i, j, reduced cost, count, min reduced cost seen).
    """
    n = xs.shape[0]
    nb = bbox.shape[0]
    oi = np.empty(max_out, np.int64)
    oj = np.empty(max_out, np.int64)
    orc = np.empty(max_out)
    cnt = 0
    worst = 0.0
    for i in range(n):
        x0 = xs[i, 0]
        x1 = xs[i, 1]
        ui = pu[i]
        for b in range(nb):
            dx = 0.0
            if x0 < bbox[b, 0]:
                dx = bbox[b, 0] - x0
            elif x0 > bbox[b, 1]:
                dx = x0 - bbox[b, 1]
            dy = 0.0
            if x1 < bbox[b, 2]:
                dy = bbox[b, 2] - x1
            elif x1 > bbox[b, 3]:
                dy = x1 - bbox[b, 3]
            if dx * dx + dy * dy + ui - bmax[b] >= -tol:
                continue
            for q in range(bptr[b], bptr[b + 1]):
                j = bitems[q]
                ex = x0 - ys[j, 0]
                ey = x1 - ys[j, 1]
                rc = ex * ex + ey * ey + ui - pv[j]
                if rc < worst:
                    worst = rc
                if rc < -tol and cnt < max_out:
                    oi[cnt] = i
                    oj[cnt] = j
                    orc[cnt] = rc
                    cnt += 1
    return oi[:cnt], oj[:cnt], orc[:cnt], cnt, worst


@njit(cache=True)
def pair_defects(x, y, ia, ib):
    """(y_a - y_b).(x_a - x_b) for index pairs."""
    k = ia.shape[0]
    out = np.empty(k)
    for q in range(k):
        a = ia[q]
        b = ib[q]
        out[q] = (y[a, 0] - y[b, 0]) * (x[a, 0] - x[b, 0]) + (y[a, 1] - y[b, 1]) * (x[a, 1] - x[b, 1])
    return out


@njit(cache=True)
def triple_defects(x, y, ia, ib, ic):
    """Half the cost gain of the better cyclic reassignment of three pairs.

    Negative values mean the triple violates cyclical monotonicity.  The
    factor one half makes the two-cycle version equal the pairwise defect.
    """
    k = ia.shape[0]
    out = np.empty(k)
    for q in range(k):
        a = ia[q]
        b = ib[q]
        c = ic[q]
        base = 0.0
        fwd = 0.0
        bwd = 0.0
        for d in range(2):
            base += (x[a, d] - y[a, d]) ** 2 + (x[b, d] - y[b, d]) ** 2 + (x[c, d] - y[c, d]) ** 2
            fwd += (x[a, d] - y[b, d]) ** 2 + (x[b, d] - y[c, d]) ** 2 + (x[c, d] - y[a, d]) ** 2
            bwd += (x[a, d] - y[c, d]) ** 2 + (x[b, d] - y[a, d]) ** 2 + (x[c, d] - y[b, d]) ** 2
        out[q] = 0.5 * (min(fwd, bwd) - base)
    return out


# ---------------------------------------------------------------------------
# network simplex on a sparse arc set
#
# Arcs 0..N-1 are artificial (node <-> root), real arcs follow.  The spanning
# tree is stored with parent / predecessor arc / thread order / subtree sizes
# so that every pivot costs time proportional to the affected subtree.  The
# layout keeps arc indices stable, so a solved basis can be resumed after new
# candidate arcs are appended.

DIR_UP = 1
DIR_DOWN = -1


@njit(cache=True)
def ns_init(supply, src, tgt, cost, flow, state, parent, pred, pred_dir, thread, rev_thread,
            succ_num, last_succ, pi, art_cost):
    N = supply.shape[0]
    root = N
    parent[root] = -1
    pred[root] = -1
    thread[root] = 0
    rev_thread[0] = root
    succ_num[root] = N + 1
    last_succ[root] = root - 1
    pi[root] = 0.0
    for u in range(N):
        e = u
        parent[u] = root
        pred[u] = e
        thread[u] = u + 1
        rev_thread[u + 1] = u
        succ_num[u] = 1
        last_succ[u] = u
        state[e] = 0
        if supply[u] >= 0:
            pred_dir[u] = DIR_UP
            pi[u] = 0.0
            src[e] = u
            tgt[e] = root
            flow[e] = supply[u]
            cost[e] = 0.0
        else:
            pred_dir[u] = DIR_DOWN
            pi[u] = art_cost
            src[e] = root
            tgt[e] = u
            flow[e] = -supply[u]
            cost[e] = art_cost


@njit(cache=True)
def ns_run(N, src, tgt, cost, flow, state, parent, pred, pred_dir, thread, rev_thread,
           succ_num, last_succ, pi, block, eps, next_arc, max_pivots):
    """Pivot until no arc has reduced cost below ``-eps``.

    Returns (status, pivots, next_arc); status 0 optimal, 2 pivot limit.
    """
    A = src.shape[0]
    first_real = N
    n_search = A - first_real
    dirty = np.empty(N + 1, np.int64)
    pivots = 0
    if n_search == 0:
        return 0, 0, next_arc
    if next_arc < first_real or next_arc >= A:
        next_arc = first_real
    while True:
        # block search for the entering arc
        mn = -eps
        in_arc = -1
        cnt = block
        e = next_arc
        for _ in range(n_search):
            if state[e] == 1:
                c = cost[e] + pi[src[e]] - pi[tgt[e]]
                if c < mn:
                    mn = c
                    in_arc = e
            e += 1
            if e == A:
                e = first_real
            cnt -= 1
            if cnt == 0:
                if in_arc >= 0:
                    break
                cnt = block
        if in_arc < 0:
            return 0, pivots, next_arc
        next_arc = e
        if pivots >= max_pivots:
            return 2, pivots, next_arc
        pivots += 1

        # join node of the cycle
        u = src[in_arc]
        v = tgt[in_arc]
        while u != v:
            if succ_num[u] < succ_num[v]:
                u = parent[u]
            else:
                v = parent[v]
        join = u

        # leaving arc (capacities are infinite, so only flows bound delta)
        first = src[in_arc]
        second = tgt[in_arc]
        delta = np.inf
        u_out = -1
        result = 0
        u = first
        while u != join:
            ea = pred[u]
            if pred_dir[u] == DIR_UP:
                d = flow[ea]
                if d < delta:
                    delta = d
                    u_out = u
                    result = 1
            u = parent[u]
        u = second
        while u != join:
            ea = pred[u]
            if pred_dir[u] == DIR_DOWN:
                d = flow[ea]
                if d <= delta:
                    delta = d
                    u_out = u
                    result = 2
            u = parent[u]
        if result == 0:
            return 1, pivots, next_arc  # unbounded; cannot happen with nonnegative costs
        if result == 1:
            u_in = first
            v_in = second
        else:
            u_in = second
            v_in = first

        # push delta around the cycle
        if delta > 0.0:
            flow[in_arc] += delta
            u = src[in_arc]
            while u != join:
                flow[pred[u]] -= pred_dir[u] * delta
                u = parent[u]
            u = tgt[in_arc]
            while u != join:
                flow[pred[u]] += pred_dir[u] * delta
                u = parent[u]
        state[in_arc] = 0
        flow[pred[u_out]] = 0.0
        state[pred[u_out]] = 1

        # ---- update the tree structure
        old_rev_thread = rev_thread[u_out]
        old_succ_num = succ_num[u_out]
        old_last_succ = last_succ[u_out]
        v_out = parent[u_out]
        if u_in == u_out:
            parent[u_in] = v_in
            pred[u_in] = in_arc
            pred_dir[u_in] = DIR_UP if u_in == src[in_arc] else DIR_DOWN
            if thread[v_in] != u_out:
                after = thread[old_last_succ]
                thread[old_rev_thread] = after
                rev_thread[after] = old_rev_thread
                after = thread[v_in]
                thread[v_in] = u_out
                rev_thread[u_out] = v_in
                thread[old_last_succ] = after
                rev_thread[after] = old_last_succ
        else:
            thread_continue = thread[old_last_succ] if old_rev_thread == v_in else thread[v_in]
            stem = u_in
            par_stem = v_in
            last = last_succ[u_in]
            after = thread[last]
            thread[v_in] = u_in
            nd = 0
            dirty[nd] = v_in
            nd += 1
            while stem != u_out:
                next_stem = parent[stem]
                thread[last] = next_stem
                dirty[nd] = last
                nd += 1
                before = rev_thread[stem]
                thread[before] = after
                rev_thread[after] = before
                parent[stem] = par_stem
                par_stem = stem
                stem = next_stem
                if last_succ[stem] == last_succ[par_stem]:
                    last = rev_thread[par_stem]
                else:
                    last = last_succ[stem]
                after = thread[last]
            parent[u_out] = par_stem
            thread[last] = thread_continue
            rev_thread[thread_continue] = last
            last_succ[u_out] = last
            if old_rev_thread != v_in:
                thread[old_rev_thread] = after
                rev_thread[after] = old_rev_thread
            for i in range(nd):
                w = dirty[i]
                rev_thread[thread[w]] = w
            tmp_sc = 0
            tmp_ls = last_succ[u_out]
            u = u_out
            p = parent[u]
            while u != u_in:
                pred[u] = pred[p]
                pred_dir[u] = -pred_dir[p]
                tmp_sc += succ_num[u] - succ_num[p]
                succ_num[u] = tmp_sc
                last_succ[p] = tmp_ls
                u = p
                p = parent[u]
            pred[u_in] = in_arc
            pred_dir[u_in] = DIR_UP if u_in == src[in_arc] else DIR_DOWN
            succ_num[u_in] = old_succ_num

        up_limit_out = join if last_succ[join] == v_in else -1
        last_succ_out = last_succ[u_out]
        u = v_in
        while u != -1 and last_succ[u] == v_in:
            last_succ[u] = last_succ_out
            u = parent[u]
        if join != old_rev_thread and v_in != old_rev_thread:
            u = v_out
            while u != up_limit_out and last_succ[u] == old_last_succ:
                last_succ[u] = old_rev_thread
                u = parent[u]
        elif last_succ_out != old_last_succ:
            u = v_out
            while u != up_limit_out and last_succ[u] == old_last_succ:
                last_succ[u] = last_succ_out
                u = parent[u]
        u = v_in
        while u != join:
            succ_num[u] += old_succ_num
            u = parent[u]
        u = v_out
        while u != join:
            succ_num[u] -= old_succ_num
            u = parent[u]

        # ---- potentials of the moved subtree
        sigma = pi[v_in] - pi[u_in] - pred_dir[u_in] * cost[in_arc]
        end = thread[last_succ[u_in]]
        u = u_in
        while u != end:
            pi[u] += sigma
            u = thread[u]


@njit(cache=True)
def ns_refresh_potentials(N, src, tgt, cost, parent, pred, pred_dir, thread, pi):
    """Recompute potentials from the tree in thread order (root first)."""
    root = N
    pi[root] = 0.0
    u = thread[root]
    while u != root:
        e = pred[u]
        pi[u] = pi[parent[u]] - pred_dir[u] * cost[e]
        u = thread[u]
