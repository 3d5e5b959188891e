"""Similarity adjustment g(z) = 2((z + 1) / 2)^t - 1 and its derivative."""
import numpy as np

from .errors import DomainError, SingularDerivative

DOMAIN_TOL = 1e-12
SINGULAR_GAP = 1e-9


def _check_domain(z):
    z = np.asarray(z, dtype=np.float64)
    if np.any(np.abs(z) > 1.0 + DOMAIN_TOL) or np.any(np.isnan(z)):
        raise DomainError("similarity adjustment is defined on [-1, 1]")
    return np.clip(z, -1.0, 1.0)


def g(z, t):
    """Monotone increasing remap of [-1, 1] onto itself; t=1 is the identity."""
    z = _check_domain(z)
    if t == 1:
        return z if z.ndim else float(z)
    out = 2.0 * ((z + 1.0) / 2.0) ** t - 1.0
    return out if out.ndim else float(out)


def g_prime(z, t):
    z = _check_domain(z)
    if t < 1 and np.any(z <= -1.0 + SINGULAR_GAP):
        raise SingularDerivative(f"g' diverges at z=-1 for t={t} < 1")
    if t == 1:
        out = np.ones_like(z)
        return out if out.ndim else 1.0
    out = t * ((z + 1.0) / 2.0) ** (t - 1.0)
    return out if out.ndim else float(out)
