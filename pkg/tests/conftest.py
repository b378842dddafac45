import numpy as np
import pytest

from remo import Enclave, InProcTransport, ModelConfig, ProviderState, Transcript, init_weights
from remo.protocol import (
    CloseSession,
    ErrorReply,
    MatMulReply,
    MatMulRequest,
    OpenSession,
    PoolReply,
    SetupBase,
)
from remo.ring import QuantParams, RingMatrix


def random_message(rng: np.random.Generator):
    """One random well-formed protocol message (all seven kinds)."""
    params = QuantParams()

    def mat() -> RingMatrix:
        rows, cols = (int(v) for v in rng.integers(1, 5, 2))
        return RingMatrix.from_ints(rng.integers(0, 2**63, (rows, cols)).tolist(), params)

    op = f"l{int(rng.integers(0, 4))}.w{int(rng.integers(0, 100))}"
    sid = int(rng.integers(0, 2**63))
    step = int(rng.integers(0, 2**31))
    kind = int(rng.integers(0, 7))
    if kind == 0:
        return SetupBase(op, mat())
    if kind == 1:
        return PoolReply(op, mat())
    if kind == 2:
        return MatMulRequest(sid, step, op, mat())
    if kind == 3:
        return MatMulReply(sid, step, op, mat())
    if kind == 4:
        return OpenSession(sid)
    if kind == 5:
        return CloseSession(sid)
    return ErrorReply("ShapeMismatch", "x" * int(rng.integers(0, 40)))


@pytest.fixture(scope="session")
def default_params():
    return QuantParams()


@pytest.fixture(scope="session")
def toy_weights():
    return init_weights(ModelConfig(), seed=1234)


@pytest.fixture()
def toy_world(toy_weights):
    """Fresh provider/enclave pair over the shared toy weights."""
    transcript = Transcript()
    provider = ProviderState(
        toy_weights.provider_view(), toy_weights.config.params, transcript=transcript
    )
    enclave = Enclave(toy_weights.enclave_view(), master_seed=99)
    return toy_weights, provider, enclave, InProcTransport(provider), transcript
