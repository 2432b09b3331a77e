import random

import pytest

from geoshard.fabric import InProcessFabric, SocketFabric
from geoshard.model import CaseRecord, Point, distance


def make_records(n, seed=0, box=100.0, dim=2, start_id=0):
    rng = random.Random(seed)
    return [
        CaseRecord(start_id + i, Point(tuple(rng.uniform(0, box) for _ in range(dim))))
        for i in range(n)
    ]


def knn_oracle(records, center, k):
    """Linear scan under the (distance, record_id) tie rule."""
    ranked = sorted((distance(r.position, center), r.record_id) for r in records)
    return [(rid, d) for d, rid in ranked[:k]]


def range_oracle(records, center, radius):
    return sorted(
        r.record_id for r in records if distance(r.position, center) <= radius
    )


@pytest.fixture(params=["inproc", "socket"])
def fabric_factory(request):
    """Builds either fabric behind one interface; tests must pass node names."""
    created = []

    def factory(names):
        if request.param == "inproc":
            fabric = InProcessFabric()
        else:
            fabric = SocketFabric({name: ("127.0.0.1", 0) for name in names})
        created.append(fabric)
        return fabric

    factory.kind = request.param
    yield factory
    for fabric in created:
        fabric.close()
