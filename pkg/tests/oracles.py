"""Independent brute-force oracles.

These are direct transcriptions of the kernel definitions (explicit
loops, broadcasting only inside a single output element) and a literal
AST walker that materializes outer products and sums contraction terms
one by one.  They share no code with the package's evaluators.
"""

import itertools

import numpy as np

from tenstream import frontend as fe


def helmholtz_direct(S, D, u):
    """t_ijk = sum S_il S_jm S_kn u_lmn; r = D*t; v_ijk = sum S_li S_mj S_nk r."""
    p = S.shape[0]
    t = np.empty((p, p, p))
    for i in range(p):
        for j in range(p):
            for k in range(p):
                t[i, j, k] = np.sum(
                    S[i, :, None, None] * S[j, None, :, None]
                    * S[k, None, None, :] * u)
    r = D * t
    v = np.empty((p, p, p))
    for i in range(p):
        for j in range(p):
            for k in range(p):
                v[i, j, k] = np.sum(
                    S[:, i][:, None, None] * S[:, j][None, :, None]
                    * S[:, k][None, None, :] * r)
    return {"t": t, "r": r, "v": v}


def interpolation_direct(A, u):
    m, n = A.shape
    w = np.empty((m, m, m))
    for a in range(m):
        for b in range(m):
            for c in range(m):
                w[a, b, c] = np.sum(
                    A[a, :][:, None, None] * A[b, :][None, :, None]
                    * A[c, :][None, None, :] * u)
    return {"w": w}


def gradient_direct(Dx, Dy, Dz, u):
    """Each derivative contracts its matrix along one axis of u; the
    differentiated axis leads in the output."""
    n0, n1, n2 = u.shape
    gx = np.empty((n0, n1, n2))
    for i in range(n0):
        for j in range(n1):
            for k in range(n2):
                gx[i, j, k] = sum(Dx[i, l] * u[l, j, k] for l in range(n0))
    gy = np.empty((n1, n0, n2))
    for j in range(n1):
        for i in range(n0):
            for k in range(n2):
                gy[j, i, k] = sum(Dy[j, m] * u[i, m, k] for m in range(n1))
    gz = np.empty((n2, n0, n1))
    for k in range(n2):
        for i in range(n0):
            for j in range(n1):
                gz[k, i, j] = sum(Dz[k, n] * u[i, j, n] for n in range(n2))
    return {"gx": gx, "gy": gy, "gz": gz}


DIRECT = {
    "helmholtz": lambda ins: helmholtz_direct(ins["S"], ins["D"], ins["u"]),
    "interpolation": lambda ins: interpolation_direct(ins["A"], ins["u"]),
    "gradient": lambda ins: gradient_direct(ins["Dx"], ins["Dy"], ins["Dz"],
                                            ins["u"]),
}


def eval_ast_direct(typed, inputs):
    """Evaluate a checked program straight off the AST: outer products
    are materialized, contractions are literal sums over index tuples."""
    env = {name: np.asarray(inputs[name], dtype=float)
           for name in inputs}

    def ev(e):
        if isinstance(e, fe.Paren):
            return ev(e.inner)
        if isinstance(e, fe.Ident):
            return env[e.name]
        if isinstance(e, fe.Product):
            return np.multiply.outer(ev(e.lhs), ev(e.rhs))
        if isinstance(e, fe.ElemMul):
            return ev(e.lhs) * ev(e.rhs)
        if isinstance(e, fe.ElemAdd):
            return ev(e.lhs) + ev(e.rhs)
        if isinstance(e, fe.Contract):
            x = ev(e.operand)
            paired = {p for pair in e.pairs for p in pair}
            keep = [i for i in range(x.ndim) if i not in paired]
            out_shape = tuple(x.shape[i] for i in keep)
            red_extents = [x.shape[a] for a, _ in e.pairs]
            out = np.zeros(out_shape)
            for out_idx in itertools.product(*(range(s) for s in out_shape)):
                total = 0.0
                for red_idx in itertools.product(*(range(s) for s in red_extents)):
                    full = [0] * x.ndim
                    for pos, val in zip(keep, out_idx):
                        full[pos] = val
                    for (a, b), val in zip(e.pairs, red_idx):
                        full[a] = val
                        full[b] = val
                    total += x[tuple(full)]
                out[out_idx] = total
            return out
        raise AssertionError(e)

    results = {}
    for stmt in typed.statements:
        val = ev(stmt.expr)
        env[stmt.target] = val
        results[stmt.target] = val
    return {d.name: results[d.name] for d in typed.outputs()}


def _strip(e):
    while isinstance(e, fe.Paren):
        e = e.inner
    return e


def _flatten_product(e):
    e = _strip(e)
    if isinstance(e, fe.Product):
        return _flatten_product(e.lhs) + _flatten_product(e.rhs)
    return [e]


def count_ops_direct(typed):
    """(multiplies, adds) of literally enumerating each statement's
    summation tree on the checked AST: a contraction of F factors costs
    F-1 multiplies per reduction term and r-1 adds per output element.
    Shapes come from the checker's annotations; no tensors are touched."""
    muls = adds = 0

    def size(shape):
        n = 1
        for x in shape:
            n *= x
        return n

    def walk(e):
        nonlocal muls, adds
        e = _strip(e)
        if isinstance(e, fe.Ident):
            return
        if isinstance(e, fe.Contract):
            factors = _flatten_product(e.operand)
            for f in factors:
                walk(f)
            m = size(e.shape)
            r = 1
            op_shape = _strip(e.operand).shape
            for a, _ in e.pairs:
                r *= op_shape[a]
            muls += m * r * (len(factors) - 1)
            adds += m * (r - 1)
            return
        if isinstance(e, fe.Product):
            walk(e.lhs)
            walk(e.rhs)
            muls += size(e.shape)
            return
        if isinstance(e, (fe.ElemMul, fe.ElemAdd)):
            walk(e.lhs)
            walk(e.rhs)
            if isinstance(e, fe.ElemMul):
                muls += size(e.shape)
            else:
                adds += size(e.shape)
            return
        raise AssertionError(e)

    for stmt in typed.statements:
        walk(stmt.expr)
    return muls, adds
