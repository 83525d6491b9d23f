"""Pure-Python inner loop of the incremental search evaluator.

This is the reference backend. The compiled extension implements the same
state machine with the same floating-point operation order, so both
backends produce identical step sequences, bounds, and unit counts; tests
compare them bit for bit. Keep any semantic change here mirrored in
``_searchcore.pyx``.

Per decision context (one per joint assignment of the undetermined
decisions) the core runs a best-first enumeration over chance-variable
paths. Heap keys are partial mass times an admissible per-context tail
bound, so complete instantiations still surface in exact descending-mass
order (ties to the lowest value indices) while shallow nodes that cannot
beat the current best leaf stay unexpanded. Zero-mass branches are never
pushed: they cannot move any bound.

Expected-utility bounds per first-stage action come from absorbed mass and
the utility range. With a second decision, absorbed instantiations are
grouped by the values of the variables observed before it; each group
aggregates (max or min, per the optimization sign) over the second
decision's alternatives, and the unabsorbed remainder is tracked per
context.
"""

from __future__ import annotations

import heapq


class SearchCore:
    def __init__(self, layout, use_cache=True):
        self.lay = layout
        self.use_cache = bool(use_cache)
        self.nlev = layout.n_levels
        self.nctx = layout.n_ctx
        self.K = len(layout.dec_vars)
        self.mode_decide = layout.mode == "decide"
        self.last_card = layout.dec_cards[-1] if self.K else 1
        self.A = layout.action_count
        self.maximize = layout.maximize
        self.u_lo = layout.u_lo
        self.u_hi = layout.u_hi
        self.pfx_pos = tuple(layout.prefix_positions)
        self.pfx_mult = tuple(layout.prefix_mults)
        self.n_group = self.nctx // self.last_card if self.nctx else 1

        # tables as python lists: float ops on plain doubles
        self.levels = []
        for lv in layout.levels:
            mass = [(ref.flat.tolist(), ref.self_stride, ref.refs) for ref in lv.mass]
            util = [(ref.flat.tolist(), ref.self_stride, ref.refs) for ref in lv.util]
            self.levels.append(
                (lv.var, lv.card, mass, util, tuple(lv.cache_refs), tuple(lv.cache_mults))
            )
        self.caches = [dict() for _ in range(self.nlev)]
        self.ubtail = [[float(x) for x in t] for t in layout.ubtail]

        self.heaps = []
        self.ctx_exhausted = [False] * self.nctx
        for c in range(self.nctx):
            m = layout.base_mass[c]
            h = []
            if m != 0.0:
                h.append((-(m * self.ubtail[c][0]), (), 0, layout.base_util[c], m))
            self.heaps.append(h)
            if not h:
                self.ctx_exhausted[c] = True

        if self.mode_decide:
            if self.K == 1:
                self.acc = [0.0] * self.A
                self.cov = [0.0] * self.A
            else:
                self.groups = {}
                self.g_acc = []
                self.g_cov = []
                self.g_agg = []
                self.g_covmin = []
                self.g_action = []
                self.act_agg = [0.0] * self.A
                self.act_covmin = [0.0] * self.A
                self.cov_ctx = [0.0] * self.nctx
        else:
            self.marg = [[0.0] * lv.card for lv in layout.levels]
            self.total = 0.0
        self._misses = 0

    # -- enumeration ------------------------------------------------------

    def _slices(self, level, path, ctx):
        var, card, mass, util, crefs, cmults = self.levels[level]
        cache = self.caches[level] if self.use_cache else None
        if cache is not None:
            key = 0
            for (kind, pos), mult in zip(crefs, cmults):
                key += (ctx[pos] if kind else path[pos]) * mult
            got = cache.get(key)
            if got is not None:
                return got
        w = [1.0] * card
        for flat, ss, refs in mass:
            off = 0
            for kind, pos, stride in refs:
                off += (ctx[pos] if kind else path[pos]) * stride
            for x in range(card):
                w[x] = w[x] * flat[off + ss * x]
        u = [0.0] * card
        for flat, ss, refs in util:
            off = 0
            for kind, pos, stride in refs:
                off += (ctx[pos] if kind else path[pos]) * stride
            for x in range(card):
                u[x] = u[x] + flat[off + ss * x]
        self._misses += 1
        if cache is not None:
            cache[key] = (w, u)
        return w, u

    def _advance(self, c):
        """Pop until one complete instantiation surfaces; None = empty."""
        h = self.heaps[c]
        nlev = self.nlev
        ctx = self.lay.ctx_vals[c]
        ubtail = self.ubtail[c]
        while h:
            negk, path, level, util, m = heapq.heappop(h)
            if level == nlev:
                return path, m, util
            w, u = self._slices(level, path, ctx)
            card = self.levels[level][1]
            tail = ubtail[level + 1]
            for x in range(card):
                wx = w[x]
                if wx != 0.0:
                    cm = m * wx
                    heapq.heappush(
                        h, (-(cm * tail), path + (x,), level + 1, util + u[x], cm))
        return None

    # -- bound bookkeeping -------------------------------------------------

    def _absorb(self, c, path, m, util):
        lay = self.lay
        if self.K == 1:
            a = lay.ctx_action[c]
            self.acc[a] = self.acc[a] + m * util
            self.cov[a] = self.cov[a] + m
            return
        key = lay.ctx_group[c]
        for p, mult in zip(self.pfx_pos, self.pfx_mult):
            key += path[p] * mult * self.n_group
        gid = self.groups.get(key)
        if gid is None:
            gid = len(self.g_acc)
            self.groups[key] = gid
            self.g_acc.append([0.0] * self.last_card)
            self.g_cov.append([0.0] * self.last_card)
            self.g_agg.append(0.0)
            self.g_covmin.append(0.0)
            self.g_action.append(lay.ctx_action[c])
        b = lay.ctx_last[c]
        acc = self.g_acc[gid]
        cov = self.g_cov[gid]
        acc[b] += m * util
        cov[b] += m
        agg = acc[0]
        covmin = cov[0]
        for i in range(1, self.last_card):
            if self.maximize:
                if acc[i] > agg:
                    agg = acc[i]
            else:
                if acc[i] < agg:
                    agg = acc[i]
            if cov[i] < covmin:
                covmin = cov[i]
        a = self.g_action[gid]
        self.act_agg[a] += agg - self.g_agg[gid]
        self.act_covmin[a] += covmin - self.g_covmin[gid]
        self.g_agg[gid] = agg
        self.g_covmin[gid] = covmin
        self.cov_ctx[c] += m

    # -- public surface ----------------------------------------------------

    def step(self):
        """Advance every open context by one absorbed instantiation.

        Returns ``(any_absorbed, cache_misses, first_context_path, mass)``.
        """
        self._misses = 0
        absorbed_any = False
        path0 = None
        mass0 = 0.0
        for c in range(self.nctx):
            if self.ctx_exhausted[c]:
                continue
            leaf = self._advance(c)
            if leaf is None:
                self.ctx_exhausted[c] = True
                continue
            path, m, util = leaf
            absorbed_any = True
            if self.mode_decide:
                self._absorb(c, path, m, util)
            else:
                marg = self.marg
                for i, x in enumerate(path):
                    marg[i][x] += m
                self.total += m
            if c == 0:
                path0 = path
                mass0 = m
            if not self.heaps[c]:
                self.ctx_exhausted[c] = True
        return absorbed_any, self._misses, path0, mass0

    def all_exhausted(self):
        return all(self.ctx_exhausted)

    def action_bounds(self):
        lower = [0.0] * self.A
        upper = [0.0] * self.A
        covered = [0.0] * self.A
        if self.K == 1:
            for a in range(self.A):
                if self.ctx_exhausted[a]:
                    rem = 0.0
                else:
                    rem = 1.0 - self.cov[a]
                    if rem < 0.0:
                        rem = 0.0
                lower[a] = self.acc[a] + rem * self.u_lo
                upper[a] = self.acc[a] + rem * self.u_hi
                covered[a] = self.cov[a]
        else:
            for a in range(self.A):
                rem = 0.0
                for c in range(a * self.last_card, (a + 1) * self.last_card):
                    if not self.ctx_exhausted[c]:
                        r = 1.0 - self.cov_ctx[c]
                        if r > 0.0:
                            rem += r
                lower[a] = self.act_agg[a] + rem * self.u_lo
                upper[a] = self.act_agg[a] + rem * self.u_hi
                covered[a] = self.act_covmin[a]
        return lower, upper, covered

    def marginal(self, level):
        return list(self.marg[level])

    def covered_total(self):
        return self.total
