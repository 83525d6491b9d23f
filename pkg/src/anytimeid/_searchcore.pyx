# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled inner loop of the incremental search evaluator.

Mirrors ``_searchcore_py.SearchCore`` operation for operation: same
absorption order, same floating-point expression shapes, same unit
accounting, so the two backends are interchangeable and bit-identical.
Keep any semantic change here mirrored in the pure module; the extension
is compiled with floating-point contraction disabled so results do not
drift from the interpreter's.
"""

from cpython.mem cimport PyMem_Free, PyMem_Malloc, PyMem_Realloc

import numpy as np

cimport numpy as cnp

cnp.import_array()


cdef struct Ref:
    char kind
    int pos
    long stride


cdef struct Fac:
    long table_off
    long self_stride
    int ref_start
    int ref_len


cdef class SearchCore:
    cdef object lay
    cdef bint use_cache, mode_decide, maximize
    cdef int nlev, nctx, K, last_card, A, maxd, n_group, n_pfx
    cdef double u_lo, u_hi

    # level metadata
    cdef int[:] lv_card
    cdef int[:] lv_mass_start, lv_mass_end, lv_util_start, lv_util_end
    cdef int[:] lv_cref_start, lv_cref_end
    cdef Fac* facs
    cdef int n_facs
    cdef Ref* refs
    cdef int n_refs
    cdef double[:] tbl
    cdef char[:] cref_kind
    cdef int[:] cref_pos
    cdef long[:] cref_mult
    cdef int[:] pfx_pos
    cdef long[:] pfx_mult

    # contexts
    cdef char[:] ctx_vals          # nctx * K
    cdef int[:] ctx_action, ctx_last, ctx_group
    cdef double[:] base_mass, base_util
    cdef double[:, :] ubtail

    # node arena
    cdef double* nd_key
    cdef double* nd_mass
    cdef double* nd_util
    cdef short* nd_level
    cdef char* nd_path
    cdef long nd_count, nd_cap

    # per-context heaps
    cdef long** hp
    cdef long* hp_len
    cdef long* hp_cap
    cdef char* ctx_exh

    # caches: per level dense key -> slice id table (or dict fallback)
    cdef list caches
    cdef long** slot
    cdef long* slot_size
    cdef double* sl_w
    cdef double* sl_u
    cdef long sl_count, sl_cap
    cdef int maxcard
    cdef long _misses

    # decide-mode bookkeeping
    cdef double[:] acc, cov
    cdef dict groups
    cdef double* g_acc
    cdef double* g_cov
    cdef double* g_agg
    cdef double* g_covmin
    cdef int* g_action
    cdef long g_count, g_cap
    cdef double[:] act_agg, act_covmin, cov_ctx

    # marginal mode
    cdef double[:] marg
    cdef int[:] marg_off
    cdef double total

    def __cinit__(self):
        self.nd_key = NULL
        self.nd_mass = NULL
        self.nd_util = NULL
        self.nd_level = NULL
        self.nd_path = NULL
        self.hp = NULL
        self.hp_len = NULL
        self.hp_cap = NULL
        self.ctx_exh = NULL
        self.facs = NULL
        self.refs = NULL
        self.sl_w = NULL
        self.sl_u = NULL
        self.slot = NULL
        self.slot_size = NULL
        self.g_acc = NULL
        self.g_cov = NULL
        self.g_agg = NULL
        self.g_covmin = NULL
        self.g_action = NULL

    def __dealloc__(self):
        cdef int c
        if self.hp != NULL:
            for c in range(self.nctx):
                PyMem_Free(self.hp[c])
            PyMem_Free(self.hp)
        PyMem_Free(self.hp_len)
        PyMem_Free(self.hp_cap)
        PyMem_Free(self.ctx_exh)
        PyMem_Free(self.nd_key)
        PyMem_Free(self.nd_mass)
        PyMem_Free(self.nd_util)
        PyMem_Free(self.nd_level)
        PyMem_Free(self.nd_path)
        PyMem_Free(self.facs)
        PyMem_Free(self.refs)
        if self.slot != NULL:
            for c in range(self.nlev):
                PyMem_Free(self.slot[c])
            PyMem_Free(self.slot)
        PyMem_Free(self.slot_size)
        PyMem_Free(self.sl_w)
        PyMem_Free(self.sl_u)
        PyMem_Free(self.g_acc)
        PyMem_Free(self.g_cov)
        PyMem_Free(self.g_agg)
        PyMem_Free(self.g_covmin)
        PyMem_Free(self.g_action)

    def __init__(self, layout, use_cache=True):
        self.lay = layout
        self.use_cache = bool(use_cache)
        self.nlev = layout.n_levels
        self.nctx = layout.n_ctx
        self.K = len(layout.dec_vars)
        self.mode_decide = layout.mode == "decide"
        self.last_card = layout.dec_cards[self.K - 1] if self.K else 1
        self.A = layout.action_count
        self.maximize = layout.maximize
        self.u_lo = layout.u_lo
        self.u_hi = layout.u_hi
        self.maxd = self.nlev if self.nlev > 0 else 1
        self.n_group = self.nctx // self.last_card if self.nctx else 1
        self.n_pfx = len(layout.prefix_positions)
        self.pfx_pos = np.array(list(layout.prefix_positions) or [0], dtype=np.int32)
        self.pfx_mult = np.array(list(layout.prefix_mults) or [0], dtype=np.int64)

        # flatten level metadata
        tables = []
        fac_list = []
        ref_list = []
        lvm = np.zeros((max(self.nlev, 1), 4), dtype=np.int32)
        cref_kind, cref_pos, cref_mult = [], [], []
        cref_range = np.zeros((max(self.nlev, 1), 2), dtype=np.int32)
        maxcard = 1
        for i, lv in enumerate(layout.levels):
            if lv.card > maxcard:
                maxcard = lv.card
            lvm[i, 0] = len(fac_list)
            for ref in lv.mass:
                fac_list.append((ref, len(tables)))
                tables.append(ref.flat)
            lvm[i, 1] = len(fac_list)
            lvm[i, 2] = len(fac_list)
            for ref in lv.util:
                fac_list.append((ref, len(tables)))
                tables.append(ref.flat)
            lvm[i, 3] = len(fac_list)
            cref_range[i, 0] = len(cref_kind)
            for (kind, pos), mult in zip(lv.cache_refs, lv.cache_mults):
                cref_kind.append(kind)
                cref_pos.append(pos)
                cref_mult.append(mult)
            cref_range[i, 1] = len(cref_kind)
        self.maxcard = maxcard

        offs = []
        total = 0
        for t in tables:
            offs.append(total)
            total += t.shape[0]
        buf = np.empty(max(total, 1), dtype=np.float64)
        for t, off in zip(tables, offs):
            buf[off:off + t.shape[0]] = t
        self.tbl = buf

        self.n_facs = len(fac_list)
        self.facs = <Fac*> PyMem_Malloc(max(self.n_facs, 1) * sizeof(Fac))
        for k, (ref, ti) in enumerate(fac_list):
            self.facs[k].table_off = offs[ti]
            self.facs[k].self_stride = ref.self_stride
            self.facs[k].ref_start = len(ref_list)
            self.facs[k].ref_len = len(ref.refs)
            for kind, pos, stride in ref.refs:
                ref_list.append((kind, pos, stride))
        self.n_refs = len(ref_list)
        self.refs = <Ref*> PyMem_Malloc(max(self.n_refs, 1) * sizeof(Ref))
        for k, (kind, pos, stride) in enumerate(ref_list):
            self.refs[k].kind = kind
            self.refs[k].pos = pos
            self.refs[k].stride = stride

        self.lv_card = np.array([lv.card for lv in layout.levels] or [0], dtype=np.int32)
        self.lv_mass_start = np.ascontiguousarray(lvm[:, 0])
        self.lv_mass_end = np.ascontiguousarray(lvm[:, 1])
        self.lv_util_start = np.ascontiguousarray(lvm[:, 2])
        self.lv_util_end = np.ascontiguousarray(lvm[:, 3])
        self.lv_cref_start = np.ascontiguousarray(cref_range[:, 0])
        self.lv_cref_end = np.ascontiguousarray(cref_range[:, 1])
        self.cref_kind = np.array(cref_kind or [0], dtype=np.int8)
        self.cref_pos = np.array(cref_pos or [0], dtype=np.int32)
        self.cref_mult = np.array(cref_mult or [0], dtype=np.int64)

        K = max(self.K, 1)
        cv = np.zeros(self.nctx * K, dtype=np.int8)
        for c, vals in enumerate(layout.ctx_vals):
            for j, x in enumerate(vals):
                cv[c * K + j] = x
        self.ctx_vals = cv
        self.ctx_action = np.array(layout.ctx_action, dtype=np.int32)
        self.ctx_last = np.array(layout.ctx_last, dtype=np.int32)
        self.ctx_group = np.array(layout.ctx_group, dtype=np.int32)
        self.base_mass = np.array(layout.base_mass, dtype=np.float64)
        self.base_util = np.array(layout.base_util, dtype=np.float64)
        self.ubtail = np.array(layout.ubtail, dtype=np.float64).reshape(self.nctx, -1)

        # node arena
        self.nd_cap = 1024
        self.nd_count = 0
        self.nd_key = <double*> PyMem_Malloc(self.nd_cap * sizeof(double))
        self.nd_mass = <double*> PyMem_Malloc(self.nd_cap * sizeof(double))
        self.nd_util = <double*> PyMem_Malloc(self.nd_cap * sizeof(double))
        self.nd_level = <short*> PyMem_Malloc(self.nd_cap * sizeof(short))
        self.nd_path = <char*> PyMem_Malloc(self.nd_cap * self.maxd)

        self.hp = <long**> PyMem_Malloc(self.nctx * sizeof(long*))
        self.hp_len = <long*> PyMem_Malloc(self.nctx * sizeof(long))
        self.hp_cap = <long*> PyMem_Malloc(self.nctx * sizeof(long))
        self.ctx_exh = <char*> PyMem_Malloc(self.nctx)
        cdef int c2, i2
        for c2 in range(self.nctx):
            self.hp_cap[c2] = 64
            self.hp[c2] = <long*> PyMem_Malloc(64 * sizeof(long))
            self.hp_len[c2] = 0
            self.ctx_exh[c2] = 0

        self.caches = [dict() for _ in range(self.nlev)]
        self.slot = <long**> PyMem_Malloc(max(self.nlev, 1) * sizeof(long*))
        self.slot_size = <long*> PyMem_Malloc(max(self.nlev, 1) * sizeof(long))
        cdef long ks, kk
        for i2 in range(self.nlev):
            self.slot[i2] = NULL
            self.slot_size[i2] = 0
            ks = layout.levels[i2].key_space
            if self.use_cache and ks <= (1 << 16):
                self.slot[i2] = <long*> PyMem_Malloc(ks * sizeof(long))
                self.slot_size[i2] = ks
                for kk in range(ks):
                    self.slot[i2][kk] = -1
        self.sl_cap = 256
        self.sl_count = 0
        self.sl_w = <double*> PyMem_Malloc(self.sl_cap * self.maxcard * sizeof(double))
        self.sl_u = <double*> PyMem_Malloc(self.sl_cap * self.maxcard * sizeof(double))
        self._misses = 0

        cdef long nid
        cdef double m
        for c2 in range(self.nctx):
            m = self.base_mass[c2]
            if m != 0.0:
                nid = self._new_node()
                self.nd_key[nid] = m * self.ubtail[c2, 0]
                self.nd_mass[nid] = m
                self.nd_util[nid] = self.base_util[c2]
                self.nd_level[nid] = 0
                self._hpush(c2, nid)
            else:
                self.ctx_exh[c2] = 1

        if self.mode_decide:
            if self.K == 1:
                self.acc = np.zeros(self.A)
                self.cov = np.zeros(self.A)
            else:
                self.groups = {}
                self.g_cap = 64
                self.g_count = 0
                self.g_acc = <double*> PyMem_Malloc(self.g_cap * self.last_card * sizeof(double))
                self.g_cov = <double*> PyMem_Malloc(self.g_cap * self.last_card * sizeof(double))
                self.g_agg = <double*> PyMem_Malloc(self.g_cap * sizeof(double))
                self.g_covmin = <double*> PyMem_Malloc(self.g_cap * sizeof(double))
                self.g_action = <int*> PyMem_Malloc(self.g_cap * sizeof(int))
                self.act_agg = np.zeros(self.A)
                self.act_covmin = np.zeros(self.A)
                self.cov_ctx = np.zeros(self.nctx)
        else:
            offsets = np.zeros(max(self.nlev, 1), dtype=np.int32)
            tot = 0
            for i, lv in enumerate(layout.levels):
                offsets[i] = tot
                tot += lv.card
            self.marg_off = offsets
            self.marg = np.zeros(max(tot, 1))
            self.total = 0.0

    # -- node arena and heaps ---------------------------------------------

    cdef long _new_node(self):
        cdef long nid = self.nd_count
        cdef long newcap
        if nid == self.nd_cap:
            newcap = self.nd_cap * 2
            self.nd_key = <double*> PyMem_Realloc(self.nd_key, newcap * sizeof(double))
            self.nd_mass = <double*> PyMem_Realloc(self.nd_mass, newcap * sizeof(double))
            self.nd_util = <double*> PyMem_Realloc(self.nd_util, newcap * sizeof(double))
            self.nd_level = <short*> PyMem_Realloc(self.nd_level, newcap * sizeof(short))
            self.nd_path = <char*> PyMem_Realloc(self.nd_path, newcap * self.maxd)
            self.nd_cap = newcap
        self.nd_count += 1
        return nid

    cdef bint _less(self, long a, long b):
        # mirrors the tuple order (-key, path, level, util, mass)
        cdef double ka = self.nd_key[a], kb = self.nd_key[b]
        if ka != kb:
            return ka > kb
        cdef int la = self.nd_level[a], lb = self.nd_level[b]
        cdef int n = la if la < lb else lb
        cdef char* pa = self.nd_path + a * self.maxd
        cdef char* pb = self.nd_path + b * self.maxd
        cdef int k
        for k in range(n):
            if pa[k] != pb[k]:
                return pa[k] < pb[k]
        if la != lb:
            return la < lb
        if self.nd_util[a] != self.nd_util[b]:
            return self.nd_util[a] < self.nd_util[b]
        return self.nd_mass[a] < self.nd_mass[b]

    cdef void _hpush(self, int c, long nid):
        cdef long* h = self.hp[c]
        cdef long n = self.hp_len[c]
        cdef long i, parent, tmp
        if n == self.hp_cap[c]:
            self.hp_cap[c] = self.hp_cap[c] * 2
            h = <long*> PyMem_Realloc(h, self.hp_cap[c] * sizeof(long))
            self.hp[c] = h
        h[n] = nid
        self.hp_len[c] = n + 1
        i = n
        while i > 0:
            parent = (i - 1) >> 1
            if self._less(h[i], h[parent]):
                tmp = h[i]
                h[i] = h[parent]
                h[parent] = tmp
            else:
                break
            i = parent

    cdef long _hpop(self, int c):
        cdef long* h = self.hp[c]
        cdef long n = self.hp_len[c] - 1
        cdef long top = h[0]
        cdef long i = 0, child, tmp
        h[0] = h[n]
        self.hp_len[c] = n
        while True:
            child = 2 * i + 1
            if child >= n:
                break
            if child + 1 < n and self._less(h[child + 1], h[child]):
                child += 1
            if self._less(h[child], h[i]):
                tmp = h[i]
                h[i] = h[child]
                h[child] = tmp
                i = child
            else:
                break
        return top

    # -- slices -------------------------------------------------------------

    cdef long _slice_for(self, int level, char* path, int c):
        """Return slice id for (level, context, path); computes on miss."""
        cdef long key = 0
        cdef int k, pos
        cdef dict cache
        cdef object got
        cdef long sid
        cdef long* dense
        cdef int kdim = self.K if self.K else 1
        if self.use_cache:
            for k in range(self.lv_cref_start[level], self.lv_cref_end[level]):
                pos = self.cref_pos[k]
                if self.cref_kind[k]:
                    key += self.ctx_vals[c * kdim + pos] * self.cref_mult[k]
                else:
                    key += path[pos] * self.cref_mult[k]
            dense = self.slot[level]
            if dense != NULL:
                sid = dense[key]
                if sid >= 0:
                    return sid
            else:
                cache = <dict> self.caches[level]
                got = cache.get(key)
                if got is not None:
                    return <long> got
        sid = self.sl_count
        if sid == self.sl_cap:
            self.sl_cap = self.sl_cap * 2
            self.sl_w = <double*> PyMem_Realloc(self.sl_w, self.sl_cap * self.maxcard * sizeof(double))
            self.sl_u = <double*> PyMem_Realloc(self.sl_u, self.sl_cap * self.maxcard * sizeof(double))
        self.sl_count += 1
        cdef double* w = self.sl_w + sid * self.maxcard
        cdef double* u = self.sl_u + sid * self.maxcard
        cdef int card = self.lv_card[level]
        cdef int x, f, r
        cdef long off
        cdef Fac fac
        for x in range(card):
            w[x] = 1.0
        for f in range(self.lv_mass_start[level], self.lv_mass_end[level]):
            fac = self.facs[f]
            off = fac.table_off
            for r in range(fac.ref_start, fac.ref_start + fac.ref_len):
                if self.refs[r].kind:
                    off += self.ctx_vals[c * kdim + self.refs[r].pos] * self.refs[r].stride
                else:
                    off += path[self.refs[r].pos] * self.refs[r].stride
            for x in range(card):
                w[x] = w[x] * self.tbl[off + fac.self_stride * x]
        for x in range(card):
            u[x] = 0.0
        for f in range(self.lv_util_start[level], self.lv_util_end[level]):
            fac = self.facs[f]
            off = fac.table_off
            for r in range(fac.ref_start, fac.ref_start + fac.ref_len):
                if self.refs[r].kind:
                    off += self.ctx_vals[c * kdim + self.refs[r].pos] * self.refs[r].stride
                else:
                    off += path[self.refs[r].pos] * self.refs[r].stride
            for x in range(card):
                u[x] = u[x] + self.tbl[off + fac.self_stride * x]
        self._misses += 1
        if self.use_cache:
            if self.slot[level] != NULL:
                self.slot[level][key] = sid
            else:
                cache = <dict> self.caches[level]
                cache[key] = sid
        return sid

    cdef long _advance(self, int c):
        """Pop until a complete instantiation surfaces; -1 = heap empty."""
        cdef long nid, sid, kid
        cdef int level, card, x, k
        cdef double m, wx, cm, tail
        cdef char* path
        cdef char* kpath
        cdef double* w
        cdef double* u
        while self.hp_len[c] > 0:
            nid = self._hpop(c)
            level = self.nd_level[nid]
            if level == self.nlev:
                return nid
            m = self.nd_mass[nid]
            path = self.nd_path + nid * self.maxd
            sid = self._slice_for(level, path, c)
            w = self.sl_w + sid * self.maxcard
            u = self.sl_u + sid * self.maxcard
            card = self.lv_card[level]
            tail = self.ubtail[c, level + 1]
            for x in range(card):
                wx = w[x]
                if wx != 0.0:
                    cm = m * wx
                    kid = self._new_node()
                    # arena may move; refresh the parent path pointer
                    path = self.nd_path + nid * self.maxd
                    kpath = self.nd_path + kid * self.maxd
                    for k in range(level):
                        kpath[k] = path[k]
                    kpath[level] = x
                    self.nd_level[kid] = level + 1
                    self.nd_key[kid] = cm * tail
                    self.nd_mass[kid] = cm
                    self.nd_util[kid] = self.nd_util[nid] + u[x]
                    self._hpush(c, kid)
        return -1

    # -- bound bookkeeping ----------------------------------------------------

    cdef void _absorb(self, int c, long nid):
        cdef double m = self.nd_mass[nid]
        cdef double util = self.nd_util[nid]
        cdef char* path = self.nd_path + nid * self.maxd
        cdef int a, b, k
        cdef long key, gid, newcap
        cdef double agg, covmin
        cdef double* acc
        cdef double* cov
        cdef object got
        if self.K == 1:
            a = self.ctx_action[c]
            self.acc[a] = self.acc[a] + m * util
            self.cov[a] = self.cov[a] + m
            return
        key = self.ctx_group[c]
        for k in range(self.n_pfx):
            key += (<long> path[self.pfx_pos[k]]) * self.pfx_mult[k] * self.n_group
        got = self.groups.get(key)
        if got is None:
            gid = self.g_count
            if gid == self.g_cap:
                newcap = self.g_cap * 2
                self.g_acc = <double*> PyMem_Realloc(self.g_acc, newcap * self.last_card * sizeof(double))
                self.g_cov = <double*> PyMem_Realloc(self.g_cov, newcap * self.last_card * sizeof(double))
                self.g_agg = <double*> PyMem_Realloc(self.g_agg, newcap * sizeof(double))
                self.g_covmin = <double*> PyMem_Realloc(self.g_covmin, newcap * sizeof(double))
                self.g_action = <int*> PyMem_Realloc(self.g_action, newcap * sizeof(int))
                self.g_cap = newcap
            self.g_count += 1
            self.groups[key] = gid
            for b in range(self.last_card):
                self.g_acc[gid * self.last_card + b] = 0.0
                self.g_cov[gid * self.last_card + b] = 0.0
            self.g_agg[gid] = 0.0
            self.g_covmin[gid] = 0.0
            self.g_action[gid] = self.ctx_action[c]
        else:
            gid = <long> got
        b = self.ctx_last[c]
        acc = self.g_acc + gid * self.last_card
        cov = self.g_cov + gid * self.last_card
        acc[b] += m * util
        cov[b] += m
        agg = acc[0]
        covmin = cov[0]
        for k in range(1, self.last_card):
            if self.maximize:
                if acc[k] > agg:
                    agg = acc[k]
            else:
                if acc[k] < agg:
                    agg = acc[k]
            if cov[k] < covmin:
                covmin = cov[k]
        a = self.g_action[gid]
        self.act_agg[a] += agg - self.g_agg[gid]
        self.act_covmin[a] += covmin - self.g_covmin[gid]
        self.g_agg[gid] = agg
        self.g_covmin[gid] = covmin
        self.cov_ctx[c] += m

    # -- public surface --------------------------------------------------------

    def step(self):
        """Advance every open context by one absorbed instantiation.

        Returns ``(any_absorbed, cache_misses, first_context_path, mass)``.
        """
        cdef bint absorbed_any = False
        cdef object path0 = None
        cdef double mass0 = 0.0
        cdef int c, i
        cdef long nid
        cdef char* path
        self._misses = 0
        for c in range(self.nctx):
            if self.ctx_exh[c]:
                continue
            nid = self._advance(c)
            if nid < 0:
                self.ctx_exh[c] = 1
                continue
            absorbed_any = True
            if self.mode_decide:
                self._absorb(c, nid)
            else:
                path = self.nd_path + nid * self.maxd
                for i in range(self.nlev):
                    self.marg[self.marg_off[i] + path[i]] += self.nd_mass[nid]
                self.total += self.nd_mass[nid]
            if c == 0:
                path = self.nd_path + nid * self.maxd
                path0 = tuple(path[i] for i in range(self.nlev))
                mass0 = self.nd_mass[nid]
            if self.hp_len[c] == 0:
                self.ctx_exh[c] = 1
        return absorbed_any, self._misses, path0, mass0

    def all_exhausted(self):
        cdef int c
        for c in range(self.nctx):
            if not self.ctx_exh[c]:
                return False
        return True

    def action_bounds(self):
        cdef list lower = [0.0] * self.A
        cdef list upper = [0.0] * self.A
        cdef list covered = [0.0] * self.A
        cdef int a, c
        cdef double rem, r
        if self.K == 1:
            for a in range(self.A):
                if self.ctx_exh[a]:
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
                    if not self.ctx_exh[c]:
                        r = 1.0 - self.cov_ctx[c]
                        if r > 0.0:
                            rem += r
                lower[a] = self.act_agg[a] + rem * self.u_lo
                upper[a] = self.act_agg[a] + rem * self.u_hi
                covered[a] = self.act_covmin[a]
        return lower, upper, covered

    def marginal(self, level):
        cdef int i = level
        return [self.marg[self.marg_off[i] + x] for x in range(self.lv_card[i])]

    def covered_total(self):
        return self.total
