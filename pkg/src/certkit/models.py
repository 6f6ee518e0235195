"""Certificate parameterizations with exact state and parameter gradients.

Two families share one contract:

* scalar certificates ``V(x)`` (``NeuralLyapunov``, ``RandomFeatureCertificate``,
  ``QuadraticLyapunov``) expose :meth:`lie_forward` / :meth:`lie_backward`,
  which compute ``V(x)`` together with the directional derivative
  ``<grad V(x), v>`` and pull gradients of both back onto the parameters;
* metric certificates ``M(x)`` (``PolynomialMetric``, ``FactoredMetric``)
  expose :meth:`quad_forward` / :meth:`quad_backward` for the bilinear form
  ``a^T M(x) b`` and its time derivative ``a^T Mdot(x) b`` along ``xdot``.

Every model keeps its parameters in one flat float64 vector ``theta``.
Reverse-mode differentiation is hand-written for each architecture.
"""
from __future__ import annotations

import itertools
import json
from typing import Optional

import numpy as np

MODEL_VERSION = "certkit-model-1"


class UnsupportedFunctional(TypeError):
    """The functional passed to :func:`param_grad` is not built from supported primitives."""


def _batched(x, p):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != p:
        raise ValueError(f"expected state dimension {p}, got {x.shape[-1]}")
    single = x.ndim == 1
    return np.atleast_2d(x), single


def monomial_exponents(p: int, degree: int) -> np.ndarray:
    """All exponent vectors of total degree <= ``degree`` in graded order."""
    exps = []
    for d in range(degree + 1):
        for combo in itertools.combinations_with_replacement(range(p), d):
            e = np.zeros(p, dtype=int)
            for i in combo:
                e[i] += 1
            exps.append(e)
    return np.array(exps, dtype=int).reshape(-1, p)


class MonomialFeatures:
    """phi(x) = (x^e for e in exponents) and its Jacobian."""

    def __init__(self, p: int, degree: int):
        self.p = p
        self.degree = degree
        self.exponents = monomial_exponents(p, degree)

    @property
    def size(self) -> int:
        return len(self.exponents)

    def __call__(self, X):
        return np.prod(X[:, None, :] ** self.exponents[None], axis=-1)

    def jacobian(self, X):
        """d phi_f / d x_k, shape (n, F, p)."""
        E = self.exponents
        pw = X[:, None, :] ** E[None]  # (n, F, p)
        out = np.empty(pw.shape)
        for k in range(self.p):
            Ek = E.copy()
            Ek[:, k] = np.maximum(E[:, k] - 1, 0)
            out[:, :, k] = E[:, k] * np.prod(X[:, None, :] ** Ek[None], axis=-1)
        return out

    def directional(self, X, V):
        """d/dt phi(x(t)) given xdot = V."""
        return np.einsum("nfk,nk->nf", self.jacobian(X), V)


class Certificate:
    kind = "base"
    is_metric = False

    theta: np.ndarray

    @property
    def n_params(self) -> int:
        return self.theta.size

    def copy(self):
        new = object.__new__(type(self))
        new.__dict__.update(self.__dict__)
        new.theta = self.theta.copy()
        return new

    def set_theta(self, theta):
        theta = np.asarray(theta, dtype=float)
        if theta.shape != self.theta.shape:
            raise ValueError(f"expected {self.theta.size} parameters, got {theta.size}")
        self.theta = theta.copy()

    def project(self):
        """Hook applied after every optimizer step; identity by default."""

    def config(self) -> dict:
        raise NotImplementedError

    def extra_arrays(self) -> list:
        return []


# -- scalar certificates ----------------------------------------------------

class ScalarCertificate(Certificate):
    def lie_forward(self, X, Vd=None):
        raise NotImplementedError

    def lie_backward(self, cache, gV, gD=None):
        raise NotImplementedError

    def value(self, x):
        X, single = _batched(x, self.p)
        V, _, _ = self.lie_forward(X)
        return V[0] if single else V

    def grad_x(self, x):
        X, single = _batched(x, self.p)
        G = np.empty_like(X)
        for k in range(self.p):
            e = np.zeros_like(X)
            e[:, k] = 1.0
            G[:, k] = self.lie_forward(X, e)[1]
        return G[0] if single else G

    def lie_derivative(self, x, v):
        X, single = _batched(x, self.p)
        Vd, _ = _batched(v, self.p)
        D = self.lie_forward(X, Vd)[1]
        return D[0] if single else D


class NeuralLyapunov(ScalarCertificate):
    """V(x) = x^T (L(x) L(x)^T + I) x with L an MLP p -> h -> h -> p*2p (tanh).

    The network output is reshaped row-major into a ``p x 2p`` matrix.
    """

    kind = "neural_lyapunov"

    def __init__(self, p: int, hidden: int = 30, seed: int = 0):
        self.p = p
        self.hidden = hidden
        self.seed = seed
        self.n_out = 2 * p * p
        h = hidden
        self._shapes = [
            ("W1", (h, p)), ("b1", (h,)),
            ("W2", (h, h)), ("b2", (h,)),
            ("W3", (self.n_out, h)), ("b3", (self.n_out,)),
        ]
        rng = np.random.default_rng(seed)
        parts = []
        for name, shape in self._shapes:
            if name.startswith("W"):
                bound = 1.0 / np.sqrt(shape[1])
                parts.append(rng.uniform(-bound, bound, size=shape).ravel())
            else:
                parts.append(np.zeros(shape).ravel())
        self.theta = np.concatenate(parts)

    def _unpack(self, vec):
        out, i = {}, 0
        for name, shape in self._shapes:
            n = int(np.prod(shape))
            out[name] = vec[i:i + n].reshape(shape)
            i += n
        return out

    def config(self):
        return {"p": self.p, "hidden": self.hidden, "seed": self.seed}

    def lie_forward(self, X, Vd=None):
        P = self._unpack(self.theta)
        n, p = X.shape
        tangent = Vd is not None
        a1 = np.tanh(X @ P["W1"].T + P["b1"])
        s1 = 1.0 - a1 * a1
        a2 = np.tanh(a1 @ P["W2"].T + P["b2"])
        s2 = 1.0 - a2 * a2
        L = (a2 @ P["W3"].T + P["b3"]).reshape(n, p, 2 * p)
        u = np.einsum("nij,ni->nj", L, X)
        V = np.einsum("nj,nj->n", u, u) + np.einsum("ni,ni->n", X, X)
        cache = {"X": X, "a1": a1, "s1": s1, "a2": a2, "s2": s2, "L": L, "u": u, "Vd": Vd}
        if not tangent:
            return V, None, cache
        dz1 = Vd @ P["W1"].T
        da1 = s1 * dz1
        dz2 = da1 @ P["W2"].T
        da2 = s2 * dz2
        dL = (da2 @ P["W3"].T).reshape(n, p, 2 * p)
        du = np.einsum("nij,ni->nj", dL, X) + np.einsum("nij,ni->nj", L, Vd)
        D = 2.0 * np.einsum("nj,nj->n", u, du) + 2.0 * np.einsum("ni,ni->n", X, Vd)
        cache.update(dz1=dz1, da1=da1, dz2=dz2, da2=da2, du=du)
        return V, D, cache

    def lie_backward(self, cache, gV, gD=None):
        P = self._unpack(self.theta)
        G = self._unpack(np.zeros_like(self.theta))
        X, a1, s1, a2, s2, u = (cache[k] for k in ("X", "a1", "s1", "a2", "s2", "u"))
        n, p = X.shape
        tangent = gD is not None and cache["Vd"] is not None
        gu = 2.0 * gV[:, None] * u
        if tangent:
            Vd, du = cache["Vd"], cache["du"]
            gu += 2.0 * gD[:, None] * du
            gdu = 2.0 * gD[:, None] * u
            gL = X[:, :, None] * gu[:, None, :] + Vd[:, :, None] * gdu[:, None, :]
            gdL = (X[:, :, None] * gdu[:, None, :]).reshape(n, -1)
        else:
            gL = X[:, :, None] * gu[:, None, :]
        go = gL.reshape(n, -1)
        G["W3"][...] = go.T @ a2
        G["b3"][...] = go.sum(axis=0)
        ga2 = go @ P["W3"]
        if tangent:
            da1, dz2, da2 = cache["da1"], cache["dz2"], cache["da2"]
            G["W3"] += gdL.T @ da2
            gda2 = gdL @ P["W3"]
            gdz2 = gda2 * s2
            ga2 += -2.0 * a2 * (gda2 * dz2)
        gz2 = ga2 * s2
        G["W2"][...] = gz2.T @ a1
        G["b2"][...] = gz2.sum(axis=0)
        ga1 = gz2 @ P["W2"]
        if tangent:
            G["W2"] += gdz2.T @ da1
            gda1 = gdz2 @ P["W2"]
            gdz1 = gda1 * s1
            ga1 += -2.0 * a1 * (gda1 * cache["dz1"])
            G["W1"] += gdz1.T @ Vd
        gz1 = ga1 * s1
        G["W1"] += gz1.T @ X
        G["b1"][...] = gz1.sum(axis=0)
        return np.concatenate([G[name].ravel() for name, _ in self._shapes])


class QuadraticLyapunov(ScalarCertificate):
    """V(x) = x^T P x with P a free (not necessarily symmetric) parameter matrix."""

    kind = "quadratic"

    def __init__(self, P):
        P = np.atleast_2d(np.asarray(P, dtype=float))
        self.p = P.shape[0]
        self.theta = P.ravel().copy()

    @property
    def P(self):
        return self.theta.reshape(self.p, self.p)

    def config(self):
        return {"p": self.p}

    def lie_forward(self, X, Vd=None):
        P = self.P
        V = np.einsum("ni,ij,nj->n", X, P, X)
        D = None if Vd is None else np.einsum("ni,ij,nj->n", X, P + P.T, Vd)
        return V, D, {"X": X, "Vd": Vd}

    def lie_backward(self, cache, gV, gD=None):
        X, Vd = cache["X"], cache["Vd"]
        G = np.einsum("n,ni,nj->ij", gV, X, X)
        if gD is not None and Vd is not None:
            G += np.einsum("n,ni,nj->ij", gD, X, Vd) + np.einsum("n,ni,nj->ij", gD, Vd, X)
        return G.ravel()


def project_l1_ball(c, radius):
    """Euclidean projection of ``c`` onto ``{z : |z|_1 <= radius}``."""
    if np.abs(c).sum() <= radius:
        return c
    u = np.sort(np.abs(c))[::-1]
    css = np.cumsum(u)
    k = np.arange(1, len(u) + 1)
    rho = np.nonzero(u * k > css - radius)[0][-1]
    tau = (css[rho] - radius) / (rho + 1.0)
    return np.sign(c) * np.maximum(np.abs(c) - tau, 0.0)


class RandomFeatureCertificate(ScalarCertificate):
    """V(x) = sum_k c_k cos(<w_k, x> + b_k) with frozen random features.

    ``w_k ~ N(0, I / bandwidth^2)``, ``b_k ~ U[0, 2 pi)``; only ``c`` is trained
    and it is kept inside the l1 ball of radius ``budget``.
    """

    kind = "random_features"

    def __init__(self, p: int, n_features: int = 200, bandwidth: float = 1.0,
                 budget: float = 100.0, seed: int = 0):
        self.p = p
        self.n_features = n_features
        self.bandwidth = bandwidth
        self.budget = budget
        self.seed = seed
        rng = np.random.default_rng(seed)
        self.W = rng.normal(0.0, 1.0 / bandwidth, size=(n_features, p))
        self.b = rng.uniform(0.0, 2 * np.pi, size=n_features)
        self.theta = np.zeros(n_features)

    def config(self):
        return {"p": self.p, "n_features": self.n_features, "bandwidth": self.bandwidth,
                "budget": self.budget, "seed": self.seed}

    def extra_arrays(self):
        return [self.W, self.b]

    def project(self):
        self.theta = project_l1_ball(self.theta, self.budget)

    def lie_forward(self, X, Vd=None):
        arg = X @ self.W.T + self.b
        cs = np.cos(arg)
        V = cs @ self.theta
        if Vd is None:
            return V, None, {"cs": cs, "dphi": None}
        dphi = -np.sin(arg) * (Vd @ self.W.T)
        return V, dphi @ self.theta, {"cs": cs, "dphi": dphi}

    def lie_backward(self, cache, gV, gD=None):
        g = gV @ cache["cs"]
        if gD is not None and cache["dphi"] is not None:
            g = g + gD @ cache["dphi"]
        return g


# -- metric certificates ----------------------------------------------------

class MetricCertificate(Certificate):
    is_metric = True

    def quad_forward(self, X, a, b, xdot=None):
        raise NotImplementedError

    def quad_backward(self, cache, gq, gqd=None):
        raise NotImplementedError

    def value(self, x):
        X, single = _batched(x, self.p)
        M = self._matrix(X)
        return M[0] if single else M

    def grad_x(self, x):
        """Tensor ``T[..., i, j, k] = dM_ij / dx_k``."""
        X, single = _batched(x, self.p)
        T = self._matrix_grad(X)
        return T[0] if single else T

    def time_derivative(self, x, xdot):
        X, single = _batched(x, self.p)
        Xd, _ = _batched(xdot, self.p)
        Md = np.einsum("nijk,nk->nij", self._matrix_grad(X), Xd)
        return Md[0] if single else Md


class PolynomialMetric(MetricCertificate):
    """M_ij(x) = <w_ij, phi(x)> with phi the monomials of degree <= ``degree``.

    Only the upper triangle ``i <= j`` is stored, so ``M`` is exactly symmetric.
    The default initialization is ``M(x) = mu * I``.
    """

    kind = "polynomial_metric"

    def __init__(self, p: int, degree: int = 2, mu: float = 1.0, seed: int = 0):
        self.p = p
        self.degree = degree
        self.mu = mu
        self.seed = seed
        self.features = MonomialFeatures(p, degree)
        self.pairs = [(i, j) for i in range(p) for j in range(i, p)]
        W = np.zeros((len(self.pairs), self.features.size))
        for idx, (i, j) in enumerate(self.pairs):
            if i == j:
                W[idx, 0] = mu
        self.theta = W.ravel()

    @property
    def W(self):
        return self.theta.reshape(len(self.pairs), self.features.size)

    def config(self):
        return {"p": self.p, "degree": self.degree, "mu": self.mu, "seed": self.seed}

    def _assemble(self, entries):
        n = entries.shape[0]
        M = np.empty((n, self.p, self.p) + entries.shape[2:])
        for idx, (i, j) in enumerate(self.pairs):
            M[:, i, j] = entries[:, idx]
            M[:, j, i] = entries[:, idx]
        return M

    def _matrix(self, X):
        return self._assemble(self.features(X) @ self.W.T)

    def _matrix_grad(self, X):
        dphi = self.features.jacobian(X)  # (n, F, p)
        return self._assemble(np.einsum("qf,nfk->nqk", self.W, dphi))

    def _pair_coeffs(self, a, b):
        cols = []
        for i, j in self.pairs:
            if i == j:
                cols.append(a[:, i] * b[:, i])
            else:
                cols.append(a[:, i] * b[:, j] + a[:, j] * b[:, i])
        return np.stack(cols, axis=1)

    def quad_forward(self, X, a, b, xdot=None):
        phi = self.features(X)
        C = self._pair_coeffs(a, b)
        q = np.einsum("nq,nq->n", C, phi @ self.W.T)
        if xdot is None:
            return q, None, {"phi": phi, "C": C, "dphi": None}
        dphi = self.features.directional(X, xdot)
        qd = np.einsum("nq,nq->n", C, dphi @ self.W.T)
        return q, qd, {"phi": phi, "C": C, "dphi": dphi}

    def quad_backward(self, cache, gq, gqd=None):
        G = np.einsum("n,nq,nf->qf", gq, cache["C"], cache["phi"])
        if gqd is not None and cache["dphi"] is not None:
            G += np.einsum("n,nq,nf->qf", gqd, cache["C"], cache["dphi"])
        return G.ravel()


class FactoredMetric(MetricCertificate):
    """M(x) = A(x)^T A(x) + mu I with A_kl(x) = <u_kl, phi(x)>.

    ``A`` has ``rank`` rows (default ``p``).  With ``rank = p * n_features``
    the factor spans every Gram form ``Z(x)^T Q Z(x)`` with ``Z = I (x) phi``,
    i.e. every sum-of-squares polynomial metric of twice the feature degree.
    Positive definite with ``lambda_min(M) >= mu`` for every parameter value.
    """

    kind = "factored_metric"

    def __init__(self, p: int, degree: int = 1, mu: float = 1.0, seed: int = 0,
                 init_scale: float = 0.1, rank=None):
        self.p = p
        self.rank = p if rank is None else int(rank)
        self.degree = degree
        self.mu = mu
        self.seed = seed
        self.init_scale = init_scale
        self.features = MonomialFeatures(p, degree)
        rng = np.random.default_rng(seed)
        r = self.rank
        U = np.zeros((r, p, self.features.size))
        U[:, :, 0] = init_scale * np.eye(r, p)
        U[:, :, 1:] = rng.uniform(-1, 1, size=(r, p, self.features.size - 1)) * init_scale / np.sqrt(
            max(self.features.size - 1, 1))
        self.theta = U.ravel()

    @property
    def U(self):
        return self.theta.reshape(self.rank, self.p, self.features.size)

    def config(self):
        return {"p": self.p, "degree": self.degree, "mu": self.mu, "seed": self.seed,
                "init_scale": self.init_scale, "rank": self.rank}

    def factor(self, X):
        return np.einsum("klf,nf->nkl", self.U, self.features(X))

    def _matrix(self, X):
        A = self.factor(X)
        return np.einsum("nki,nkj->nij", A, A) + self.mu * np.eye(self.p)

    def _matrix_grad(self, X):
        A = self.factor(X)
        dA = np.einsum("klf,nfm->nklm", self.U, self.features.jacobian(X))
        T = np.einsum("nkim,nkj->nijm", dA, A)
        return T + np.swapaxes(T, 1, 2)

    def quad_forward(self, X, a, b, xdot=None):
        phi = self.features(X)
        A = np.einsum("klf,nf->nkl", self.U, phi)
        Aa = np.einsum("nkl,nl->nk", A, a)
        Ab = np.einsum("nkl,nl->nk", A, b)
        q = np.einsum("nk,nk->n", Aa, Ab) + self.mu * np.einsum("ni,ni->n", a, b)
        cache = {"phi": phi, "a": a, "b": b, "Aa": Aa, "Ab": Ab, "dphi": None}
        if xdot is None:
            return q, None, cache
        dphi = self.features.directional(X, xdot)
        dA = np.einsum("klf,nf->nkl", self.U, dphi)
        dAa = np.einsum("nkl,nl->nk", dA, a)
        dAb = np.einsum("nkl,nl->nk", dA, b)
        qd = np.einsum("nk,nk->n", dAa, Ab) + np.einsum("nk,nk->n", Aa, dAb)
        cache.update(dphi=dphi, dAa=dAa, dAb=dAb)
        return q, qd, cache

    def quad_backward(self, cache, gq, gqd=None):
        a, b, Aa, Ab, phi = (cache[k] for k in ("a", "b", "Aa", "Ab", "phi"))
        gA = gq[:, None, None] * (Ab[:, :, None] * a[:, None, :] + Aa[:, :, None] * b[:, None, :])
        G = np.einsum("nkl,nf->klf", gA, phi)
        if gqd is not None and cache["dphi"] is not None:
            dAa, dAb = cache["dAa"], cache["dAb"]
            gA2 = gqd[:, None, None] * (dAa[:, :, None] * b[:, None, :] + dAb[:, :, None] * a[:, None, :])
            gdA = gqd[:, None, None] * (Ab[:, :, None] * a[:, None, :] + Aa[:, :, None] * b[:, None, :])
            G += np.einsum("nkl,nf->klf", gA2, phi) + np.einsum("nkl,nf->klf", gdA, cache["dphi"])
        return G.ravel()


MODEL_KINDS = {
    cls.kind: cls
    for cls in (NeuralLyapunov, QuadraticLyapunov, RandomFeatureCertificate,
                PolynomialMetric, FactoredMetric)
}


# -- module-level contract --------------------------------------------------

def cert_value(model: Certificate, x):
    return model.value(x)


def cert_grad_x(model: Certificate, x):
    return model.grad_x(x)


def metric_time_derivative(model: MetricCertificate, x, xdot):
    """Mdot = sum_k dM/dx_k * xdot_k."""
    if not model.is_metric:
        raise TypeError("metric_time_derivative requires a metric certificate")
    return model.time_derivative(x, xdot)


def hinge(z):
    """ReLU with the subgradient at exactly 0 taken to be 0."""
    return np.maximum(z, 0.0), (z > 0).astype(float)


class Objective:
    """A scalar functional of a certificate's parameters.

    Subclasses implement :meth:`value_and_grad`, returning the value and its
    exact gradient with respect to ``model.theta``.
    """

    def value_and_grad(self, model: Certificate, batch=None):
        raise NotImplementedError

    def __add__(self, other):
        return Sum([(1.0, self), (1.0, other)])

    def __rmul__(self, weight):
        return Sum([(float(weight), self)])


class Sum(Objective):
    def __init__(self, terms):
        self.terms = []
        for w, t in terms:
            if not isinstance(t, Objective):
                raise UnsupportedFunctional(f"{t!r} is not an Objective")
            self.terms.append((w, t))

    def value_and_grad(self, model, batch=None):
        total, grad = 0.0, np.zeros_like(model.theta)
        for w, t in self.terms:
            v, g = t.value_and_grad(model, batch)
            total += w * v
            grad += w * g
        return total, grad


class Zero(Objective):
    def value_and_grad(self, model, batch=None):
        return 0.0, np.zeros_like(model.theta)


class ParamNormSq(Objective):
    def value_and_grad(self, model, batch=None):
        return float(model.theta @ model.theta), 2.0 * model.theta


class ValueAt(Objective):
    """sum_i V(x_i) for a scalar certificate."""

    def __init__(self, x):
        self.x = np.atleast_2d(np.asarray(x, dtype=float))

    def value_and_grad(self, model, batch=None):
        V, _, cache = model.lie_forward(self.x)
        return float(V.sum()), model.lie_backward(cache, np.ones_like(V))


class LieDerivativeAt(Objective):
    """sum_i <grad V(x_i), v_i> for a scalar certificate."""

    def __init__(self, x, v):
        self.x = np.atleast_2d(np.asarray(x, dtype=float))
        self.v = np.atleast_2d(np.asarray(v, dtype=float))

    def value_and_grad(self, model, batch=None):
        V, D, cache = model.lie_forward(self.x, self.v)
        return float(D.sum()), model.lie_backward(cache, np.zeros_like(V), np.ones_like(D))


class QuadFormAt(Objective):
    """sum_i a_i^T M(x_i) b_i (+ a_i^T Mdot b_i when ``xdot`` given) for a metric."""

    def __init__(self, x, a, b, xdot=None):
        self.x, self.a, self.b = (np.atleast_2d(np.asarray(v, dtype=float)) for v in (x, a, b))
        self.xdot = None if xdot is None else np.atleast_2d(np.asarray(xdot, dtype=float))

    def value_and_grad(self, model, batch=None):
        q, qd, cache = model.quad_forward(self.x, self.a, self.b, self.xdot)
        gq = np.ones_like(q)
        if qd is None:
            return float(q.sum()), model.quad_backward(cache, gq)
        return float(q.sum() + qd.sum()), model.quad_backward(cache, gq, np.ones_like(qd))


def param_grad(model: Certificate, functional: Objective, batch=None) -> np.ndarray:
    """Exact gradient of ``functional`` with respect to ``model.theta``."""
    if not isinstance(functional, Objective):
        raise UnsupportedFunctional(
            f"functional of type {type(functional).__name__} is not built from supported primitives"
        )
    return functional.value_and_grad(model, batch)[1]


# -- checkpoints -------------------------------------------------------------

def save_model(model: Certificate, path) -> None:
    arrays = [model.theta] + list(model.extra_arrays())
    header = {
        "version": MODEL_VERSION,
        "kind": model.kind,
        "config": model.config(),
        "sizes": [int(a.size) for a in arrays],
    }
    if model.kind == "quadratic":
        header["config"] = {"p": model.p}
    with open(path, "wb") as fh:
        fh.write((json.dumps(header, sort_keys=True) + "\n").encode("utf-8"))
        for a in arrays:
            fh.write(np.ascontiguousarray(a, dtype="<f8").tobytes())


def load_model(path) -> Certificate:
    from .datagen import FormatError

    with open(path, "rb") as fh:
        raw = fh.read()
    nl = raw.find(b"\n")
    if nl < 0:
        raise FormatError("missing header line", offset=len(raw))
    try:
        header = json.loads(raw[:nl].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"malformed header: {exc}", offset=0) from None
    if header.get("version") != MODEL_VERSION:
        raise FormatError(f"unsupported model version {header.get('version')!r}", offset=0,
                          version=True)
    kind = header["kind"]
    if kind not in MODEL_KINDS:
        raise FormatError(f"unknown model kind {kind!r}", offset=0)
    offset = nl + 1
    arrays = []
    for size in header["sizes"]:
        need = 8 * size
        if len(raw) < offset + need:
            raise FormatError(f"payload truncated at byte {len(raw)}", offset=len(raw))
        arrays.append(np.frombuffer(raw[offset:offset + need], dtype="<f8").astype(float))
        offset += need
    cfg = header["config"]
    if kind == "quadratic":
        model = QuadraticLyapunov(np.zeros((cfg["p"], cfg["p"])))
    else:
        model = MODEL_KINDS[kind](**cfg)
    model.set_theta(arrays[0])
    if kind == "random_features":
        model.W = arrays[1].reshape(model.n_features, model.p)
        model.b = arrays[2]
    return model
