import numpy as np
import pytest

from tallpack import (
    SyntheticSpec,
    TaskVector,
    TensorMap,
    compute_task_vector,
    gen_disjoint_tasks,
    sum_task_vectors,
)


def tmap(**tensors) -> TensorMap:
    return TensorMap({k: np.asarray(v, dtype=np.float32) for k, v in tensors.items()})


def tvec(values, label="t") -> TaskVector:
    return TaskVector(tensors=tmap(w=values), source_label=label)


@pytest.fixture
def disjoint_fixture():
    """Small controlled collection: 4 tasks over 400 scalars, known supports."""
    spec = SyntheticSpec(total_params=400, num_tasks=4, seed=123)
    pretrained, finetuned, supports = gen_disjoint_tasks(spec)
    vectors = [
        compute_task_vector(ft, pretrained, label=f"task{i:02d}")
        for i, ft in enumerate(finetuned)
    ]
    mtl = sum_task_vectors(vectors)
    return pretrained, finetuned, vectors, mtl, supports
