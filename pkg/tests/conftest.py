import pytest
from peewee import SqliteDatabase
from loguru import logger
import sys

from database import database_proxy, LayerSummary, MetaData
from ir import (
    Annotation, AnnotationKind, AnnotationSet, GraphBuilder, GraphKind, OpKind, OpName, ReplicaGroup,
)

@pytest.fixture
def enable_logging():
    """Automatically enable Loguru logging for all tests."""
    logger.remove()
    logger.add(sys.stdout, level="DEBUG", format="{time} {level} {message}")
    yield


@pytest.fixture
def use_in_memory_db(enable_logging):
    """Create an in-memory database for testing."""
    test_db = SqliteDatabase(':memory:', autoconnect=False)
    database_proxy.initialize(test_db)
    test_db.connect()
    test_db.create_tables([LayerSummary, MetaData], safe=True)
    yield test_db
    test_db.close()


def _group(cores, ranks):
    return ReplicaGroup(tuple(ranks)) if ranks is not None else ReplicaGroup.of(cores)


def shard(node_id, dim, cores=2, ranks=None):
    group = _group(cores, ranks)
    return Annotation(node_id, (node_id,) * group.size, AnnotationKind.SHARD, group, dim)


def replicate(node_id, cores=2, ranks=None):
    group = _group(cores, ranks)
    return Annotation(node_id, (node_id,) * group.size, AnnotationKind.REPLICATE, group)


@pytest.fixture
def tp_matmul():
    """Baseline y = x @ w against a four-way row/column split with one all-reduce."""
    b = GraphBuilder(GraphKind.BASELINE, layer=0, file="model.py")
    b.input("x", (4, 8))
    b.input("w", (8, 6))
    b.add("y", OpKind.of(OpName.DOT), ["x", "w"])
    g_s = b.build(["y"])

    m = GraphBuilder(GraphKind.DISTRIBUTED, layer=0, file="model_tp.py")
    m.input("x", (4, 2))
    m.input("w", (2, 6))
    m.add("y", OpKind.of(OpName.DOT), ["x", "w"])
    m.add("z", OpKind.of(OpName.ALL_REDUCE, group=(0, 1, 2, 3), combiner="add"), ["y"])
    g_m = m.build(["z"])
    return g_s, g_m, AnnotationSet((shard("x", 1, 4), shard("w", 0, 4)))
