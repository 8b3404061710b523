"""Reference values and independent numerical oracles shared by the tests."""

import numpy as np

# 1/I0(1) from the series sum_k (1/4)^k / (k!)^2 in exact rationals
INV_I0_1 = 0.78984831482511196642

# Kusuoka-Stroock p = -0.5 at (x, 0.1, 0.2): lambda^(0) and lambda^(3) from a
# hand derivation of the bracket rows with 80-digit derivatives
KS_LAMBDA = {
    1e-4: (3.720075976020836e-44, 1.2393157014981371e-11),
    2e-4: (1.9531818567221504e-31, 0.10686636275691855),
    1e-3: (1.8467266624096931e-14, 1.0),
}
# |x| below which lambda^(3) < 1e-30 for the same family
KS_K_THRESHOLD = 4.35187742902023e-5


def random_poly_field(rng, d, degree=2, terms=3):
    """Source strings for a random polynomial vector field in d variables."""
    names = ["x", "y", "z"][:d] if d <= 3 else [f"x{i}" for i in range(1, d + 1)]
    comps = []
    for _ in range(d):
        parts = []
        for _ in range(terms):
            c = rng.uniform(-2, 2)
            powers = rng.integers(0, degree + 1, size=d)
            mono = "*".join(f"{n}^{int(k)}" for n, k in zip(names, powers) if k)
            parts.append(f"({c!r})" + (f"*{mono}" if mono else ""))
        comps.append(" + ".join(parts))
    return comps


def fd_jacobian(F, x, h=1e-5):
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for j in range(len(x)):
        e = np.zeros_like(x)
        e[j] = h
        cols.append((np.asarray(F(x + e)) - np.asarray(F(x - e))) / (2 * h))
    return np.stack(cols, axis=1)


def fd_bracket(X, Y, x, h=1e-5):
    """[X, Y](x) = DY X - DX Y with central-difference Jacobians."""
    x = np.asarray(x, dtype=np.float64)
    return fd_jacobian(Y, x, h) @ np.asarray(X(x)) - fd_jacobian(X, x, h) @ np.asarray(Y(x))
