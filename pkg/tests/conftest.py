import numpy as np
import pytest

from opalab.datagen import GenConfig
from opalab.model import ConstraintSpec, Instance, Parcel, Route


def hand_instance(capacity: int = 1) -> Instance:
    """Two parcels, one capacity-bound hub H: A costs r1=1 via H or r2=3; B costs s1=1 via H or s2=2."""
    routes = (
        Route("r1", ("H",), "P", ("X", "Y")),
        Route("r2", ("G",), "Q", ("X", "Y")),
        Route("s1", ("H",), "P", ("X", "Y")),
        Route("s2", ("G2",), "Q", ("X", "Y")),
    )
    parcels = (
        Parcel(0, "X", "Y", 1.0, (("r1", 1.0), ("r2", 3.0))),
        Parcel(1, "X", "Y", 1.0, (("s1", 1.0), ("s2", 2.0))),
    )
    return Instance("hand", parcels, routes, (ConstraintSpec.capacity("capH", "H", capacity),))


def random_tiny_instance(rng: np.random.Generator, max_parcels: int = 10, max_routes: int = 3,
                         with_proportion: bool = True, tight: float = 0.7) -> Instance:
    """Random small instance: 2 ODs, up to 5 routes per OD over 4 hubs, capacity (+ proportion) rows."""
    hubs = ["h0", "h1", "h2", "h3"]
    providers = ["p0", "p1"]
    ods = [("a", "b"), ("a", "c")]
    routes = []
    for o, od in enumerate(ods):
        for r in range(5):
            k = int(rng.integers(1, 3))
            hs = tuple(sorted(rng.choice(hubs, size=k, replace=False).tolist()))
            routes.append(Route(f"{od[0]}{od[1]}{r}", hs, providers[int(rng.integers(2))], od))
    m = int(rng.integers(1, max_parcels + 1))
    parcels = []
    for t in range(m):
        od = ods[int(rng.integers(len(ods)))]
        pool = [r for r in routes if r.od == od]
        n = int(rng.integers(1, max_routes + 1))
        chosen = rng.choice(len(pool), size=n, replace=False)
        cands = tuple((pool[int(j)].id, float(np.round(rng.uniform(1, 10), 3))) for j in sorted(chosen))
        parcels.append(Parcel(t, od[0], od[1], float(rng.uniform(0.5, 5)), cands))
    cons = []
    for h in hubs:
        cons.append(ConstraintSpec.capacity(f"cap-{h}", h, max(1, int(round(tight * m / 2)))))
    if with_proportion:
        lo = float(np.round(rng.uniform(0.0, 0.4), 2))
        cons.append(ConstraintSpec.proportion("prop-ab", ("a", "b"), "p0", lo, float(np.round(lo + 0.5, 2))))
    return Instance(f"tiny-{m}", tuple(parcels), tuple(routes), tuple(cons))


@pytest.fixture
def hand():
    return hand_instance()


@pytest.fixture
def small_config() -> GenConfig:
    return GenConfig(seed=5, n_parcels=400, n_hubs=6, n_od_pairs=6, n_providers=3, proportion_fraction=0.5)


# -- network helpers ------------------------------------------------------------

def tiny_net_config(**kw):
    from opalab.nets import NetConfig
    base = dict(n_locations=5, n_providers=3, embed=6, parcel_hidden=(7,), route_hidden=(9, 8), scorer_hidden=5,
                attn_dim=4, out_hidden=5, dtype="float64")
    base.update(kw)
    return NetConfig(**base)


def random_batch(rng: np.random.Generator, B: int, N: int, n_locations: int = 5, n_providers: int = 3):
    """Random observation batch; slot 0 is always real and padded slots are zero rows."""
    from opalab.nets import Batch
    mask = rng.random((B, N)) < 0.7
    mask[:, 0] = True
    parcel = np.c_[rng.random(B), rng.integers(0, n_locations, B), rng.integers(0, n_locations, B), rng.random(B)]
    routes = np.concatenate([rng.normal(size=(B, N, 4)), rng.integers(1, n_providers + 1, (B, N, 1))], axis=2)
    return Batch(parcel, routes * mask[..., None], mask)


def randomize_params(net, rng: np.random.Generator, scale: float = 0.3) -> None:
    for v in net.params.values():
        v += scale * rng.normal(size=v.shape)


def fd_worst_error(net, batch, rng: np.random.Generator, h: float = 1e-5, floor: float = 1e-6) -> float:
    """Largest relative error between analytic and central-difference gradients of ``<u, net(batch)>``.

    Entries whose absolute difference is within ``floor`` count as exact.
    """
    out, cache = net.forward(batch)
    u = rng.normal(size=out.shape)
    grads = net.backward(cache, u)
    worst = 0.0
    for name, p in net.params.items():
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            fp = float((net.forward(batch)[0] * u).sum())
            p[idx] = old - h
            fm = float((net.forward(batch)[0] * u).sum())
            p[idx] = old
            num, ana = (fp - fm) / (2 * h), float(grads[name][idx])
            diff = abs(ana - num)
            if diff > floor:
                worst = max(worst, diff / max(abs(ana), abs(num)))
    return worst


# -- acceptance summary -----------------------------------------------------------

ACCEPTANCE_LINES: dict[int, str] = {}


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for n in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[n])
