"""The three concrete energy models behind one interface.

Every model describes an energy of the form

    E(v) = alpha * ( 1/2 * [gradient term] + int Phi(v) - <H, v> )

where the gradient term is |grad v|^2 for the shift-linearized models and
Psi(|grad v|^2) for the frozen-diffusion model, Phi is the reaction
potential and H an optional load functional.  The attributes consumed by
the assembly and adaptivity machinery are:

  alpha          energy scaling
  linearization  ("shift", eta) or ("frozen_diffusion",)
  gram           NormSpec used for dual residual norms
  phi, Phi       reaction and its potential (None for frozen diffusion)
  psi, Psi       diffusion coefficient and antiderivative (frozen only)
  load_kind      "none" | "function" | "weak_gradient" | "p1_interp"
  exact, exact_gradient   manufactured solution, when available
"""

import numpy as np

from .fem import NormSpec, eta_norm, h1_seminorm

__all__ = [
    "EnergyModel",
    "KacanovModel",
    "P1TargetModel",
    "SemilinearLogModel",
    "SineGordonModel",
    "exact_solution_kacanov",
    "exact_solution_sine_gordon",
    "kacanov_gradient",
    "make_model",
    "sine_gordon_gradient",
    "sine_gordon_load",
]


class EnergyModel:
    """Common defaults; concrete models override what they use."""

    kind = "abstract"
    alpha = 1.0
    linearization = ("shift", 0.0)
    gram = NormSpec("h1")
    phi = None
    Phi = None
    psi = None
    Psi = None
    load_kind = "none"
    exact = None
    exact_gradient = None
    singular_corner = None
    default_domain = "square"

    @property
    def fingerprint(self):
        return (self.kind,)

    def __repr__(self):
        return f"{type(self).__name__}()"


class SemilinearLogModel(EnergyModel):
    """Semilinear reaction f(u) = nu*log(1+|u|) - u + 1 on the unit square,
    linearized by the shifted Laplacian with shift eta.

    The reaction potential is the sign-symmetric antiderivative of -f:
    Phi(z) = z^2/2 - z - nu*sign(z)*((1+|z|)log(1+|z|) - |z|).
    """

    kind = "semilinear_log"

    def __init__(self, nu=1.0, eta=2.0):
        if nu <= 0:
            raise ValueError("reaction strength nu must be positive")
        if eta <= 0:
            raise ValueError("shift eta must be positive")
        self.nu = float(nu)
        self.eta = float(eta)
        self.linearization = ("shift", self.eta)
        self.gram = eta_norm(self.eta)

    @property
    def fingerprint(self):
        return (self.kind, self.nu, self.eta)

    def f(self, z):
        z = np.asarray(z, dtype=float)
        return self.nu * np.log1p(np.abs(z)) - z + 1.0

    def phi(self, z):
        # -f; the derivative of the odd potential G is the even log term
        z = np.asarray(z, dtype=float)
        return z - 1.0 - self.nu * np.log1p(np.abs(z))

    def Phi(self, z):
        z = np.asarray(z, dtype=float)
        a = np.abs(z)
        g = (1.0 + a) * np.log1p(a) - a
        return 0.5 * z * z - z - self.nu * np.sign(z) * g

    def __repr__(self):
        return f"SemilinearLogModel(nu={self.nu}, eta={self.eta})"


def exact_solution_sine_gordon(x, y):
    """Manufactured solution sin(pi x) sin(pi y) on the unit square."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return np.sin(np.pi * x) * np.sin(np.pi * y)


def sine_gordon_gradient(x, y):
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    return (np.pi * np.cos(np.pi * x) * np.sin(np.pi * y),
            np.pi * np.sin(np.pi * x) * np.cos(np.pi * y))


def sine_gordon_load(x, y):
    """Load making sin(pi x) sin(pi y) solve -Lap u + u^3 + sin u = h."""
    s = exact_solution_sine_gordon(x, y)
    return 2.0 * np.pi ** 2 * s + s ** 3 + np.sin(s)


class SineGordonModel(EnergyModel):
    """Modified sine-Gordon problem -Lap u + u^3 + sin u = h on the unit
    square with the manufactured solution sin(pi x) sin(pi y), damped
    gradient-type linearization (pure Laplacian, scaling alpha)."""

    kind = "sine_gordon"
    linearization = ("shift", 0.0)
    gram = h1_seminorm()
    load_kind = "function"

    def __init__(self, alpha=0.25):
        if not 0.0 < alpha < 1.0:
            raise ValueError("damping alpha must lie in (0, 1)")
        self.alpha = float(alpha)

    @property
    def fingerprint(self):
        return (self.kind, self.alpha)

    @staticmethod
    def phi(z):
        z = np.asarray(z, dtype=float)
        return z ** 3 + np.sin(z)

    @staticmethod
    def Phi(z):
        z = np.asarray(z, dtype=float)
        # 1 - cos z written as 2 sin^2(z/2) to keep small values accurate
        return 0.25 * z ** 4 + 2.0 * np.sin(0.5 * z) ** 2

    h = staticmethod(sine_gordon_load)
    exact = staticmethod(exact_solution_sine_gordon)
    exact_gradient = staticmethod(sine_gordon_gradient)

    def __repr__(self):
        return f"SineGordonModel(alpha={self.alpha})"


def _lshape_angle(x, y):
    phi = np.arctan2(y, x)
    return np.where(phi < 0.0, phi + 2.0 * np.pi, phi)


def exact_solution_kacanov(x, y):
    """Manufactured solution on the L-shaped domain with the r^(2/3)
    corner singularity at the origin:

    u*(r, phi) = r^(2/3) sin(2 phi/3) (1 - x^2)(1 - y^2) cos(phi),

    with the polar angle measured so the re-entrant edges carry phi = 0
    and phi = 3 pi / 2 (both zeros of sin(2 phi / 3))."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = np.hypot(x, y)
    phi = _lshape_angle(x, y)
    s = np.where(r > 0.0, r, 1.0) ** (2.0 / 3.0) * np.sin(2.0 * phi / 3.0)
    s = np.where(r > 0.0, s, 0.0)
    return s * (1.0 - x * x) * (1.0 - y * y) * np.cos(phi)


def kacanov_gradient(x, y):
    """Analytic gradient of :func:`exact_solution_kacanov`; rejects the
    singular origin."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    r = np.hypot(x, y)
    if np.any(r == 0.0):
        raise ValueError("gradient is singular at the re-entrant corner")
    phi = _lshape_angle(x, y)
    cphi = np.cos(phi)
    sphi = np.sin(phi)
    f = np.sin(2.0 * phi / 3.0) * cphi
    fp = (2.0 / 3.0) * np.cos(2.0 * phi / 3.0) * cphi \
        - np.sin(2.0 * phi / 3.0) * sphi
    rm = r ** (-1.0 / 3.0)
    a = 2.0 / 3.0
    Sx = rm * (a * f * cphi - fp * sphi)
    Sy = rm * (a * f * sphi + fp * cphi)
    S = r ** a * f
    Q = (1.0 - x * x) * (1.0 - y * y)
    Qx = -2.0 * x * (1.0 - y * y)
    Qy = -2.0 * y * (1.0 - x * x)
    return Sx * Q + S * Qx, Sy * Q + S * Qy


class KacanovModel(EnergyModel):
    """Quasilinear conservation law with diffusion psi(t) = 1 + exp(-t) on
    the L-shaped domain; frozen-coefficient linearization.

    The difference-quotient monotonicity constants of psi(t^2) t are
    m_psi = 1 - 2 exp(-3/2) and M_psi = 2 (the quotient dips below the
    infimum psi value 1 near t = sqrt(3/2), so m_psi is strictly smaller
    than inf psi).  The manufactured load is represented weakly through
    its gradient-dual vectors under degree-6 quadrature.
    """

    kind = "kacanov"
    linearization = ("frozen_diffusion",)
    gram = h1_seminorm()
    load_kind = "weak_gradient"
    m_psi = 1.0 - 2.0 * np.exp(-1.5)
    M_psi = 2.0
    singular_corner = (0.0, 0.0)
    default_domain = "lshape"

    def __init__(self, alpha=1.0):
        if alpha <= 0:
            raise ValueError("scaling alpha must be positive")
        self.alpha = float(alpha)

    @property
    def fingerprint(self):
        return (self.kind, self.alpha)

    @staticmethod
    def psi(t):
        t = np.asarray(t, dtype=float)
        return 1.0 + np.exp(-t)

    @staticmethod
    def Psi(t):
        t = np.asarray(t, dtype=float)
        return t - np.expm1(-t)

    exact = staticmethod(exact_solution_kacanov)
    exact_gradient = staticmethod(kacanov_gradient)

    def __repr__(self):
        return f"KacanovModel(alpha={self.alpha})"


class P1TargetModel(EnergyModel):
    """Verification model whose discrete critical point is a prescribed P1
    function on a base mesh.

    The energy is 1/2 ||grad v||^2 + eta/2 ||v||^2 - <A u_t, v> with the
    load defined weakly from the target u_t.  Because red-green descendants
    of the base mesh never straddle base elements, u_t stays piecewise
    linear on every refinement, all integrals are exact, and the discrete
    solution on any refinement is exactly u_t.
    """

    kind = "p1_target"
    load_kind = "p1_interp"

    def __init__(self, base_mesh, target_coeffs, eta=1.0):
        from .fem import FeFunction

        self.base = FeFunction(base_mesh, np.asarray(target_coeffs, float))
        self.eta = float(eta)
        self.linearization = ("shift", self.eta)
        self.gram = eta_norm(self.eta) if self.eta > 0 else h1_seminorm()
        self._token = id(self.base)

    @property
    def fingerprint(self):
        return (self.kind, self.eta, self._token)

    def phi(self, z):
        return self.eta * np.asarray(z, dtype=float)

    def Phi(self, z):
        z = np.asarray(z, dtype=float)
        return 0.5 * self.eta * z * z

    def target_values(self, points):
        return np.array([self.base.point_values(p) for p in points])

    def exact(self, x, y):
        pts = np.stack(np.broadcast_arrays(
            np.asarray(x, float), np.asarray(y, float)), axis=-1)
        flat = pts.reshape(-1, 2)
        vals = np.atleast_1d(self.base.point_values(flat))
        return vals.reshape(pts.shape[:-1])

    @property
    def exact_gradient(self):
        base = self.base
        grads = base.mesh.gradients()
        nodal = base.vertex_values()[base.mesh.elements]
        ge = np.einsum("ei,eid->ed", nodal, grads)
        corners = base.mesh.vertices[base.mesh.elements]

        def grad(x, y):
            from .fem import _barycentric
            xs = np.asarray(x, float)
            pts = np.stack(np.broadcast_arrays(xs, np.asarray(y, float)),
                           axis=-1).reshape(-1, 2)
            gx = np.empty(pts.shape[0])
            gy = np.empty(pts.shape[0])
            for i, xy in enumerate(pts):
                lam = _barycentric(corners, xy)
                e = int(np.argmax(np.all(lam >= -1e-12, axis=1)))
                gx[i], gy[i] = ge[e]
            shape = np.broadcast_shapes(np.shape(x), np.shape(y))
            return gx.reshape(shape), gy.reshape(shape)

        return grad


_MODEL_KINDS = {
    "semilinear_log": SemilinearLogModel,
    "sine_gordon": SineGordonModel,
    "kacanov": KacanovModel,
}


def make_model(kind, **params):
    """Build a fully wired model by kind name.

    Parameters
    ----------
    kind : str
        One of ``semilinear_log`` (params nu, eta), ``sine_gordon``
        (param alpha), ``kacanov`` (param alpha).
    """
    try:
        cls = _MODEL_KINDS[kind]
    except KeyError:
        raise ValueError(f"unknown model kind {kind!r}; "
                         f"choose from {sorted(_MODEL_KINDS)}") from None
    return cls(**params)
