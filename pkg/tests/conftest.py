import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from atlas.attest import Identity, TeePlatform
from atlas.log import TransparencyLog, TrustStore
from atlas.pipeline import DemoEnv, build_chain, provision


@pytest.fixture
def platform() -> TeePlatform:
    return TeePlatform()


@pytest.fixture
def client_identity() -> Identity:
    return Identity.generate(created_inside_tee=True)


@pytest.fixture
def producer_identity() -> Identity:
    return Identity.generate(created_inside_tee=False)


@pytest.fixture
def trust(platform, producer_identity) -> TrustStore:
    store = TrustStore()
    store.add_platform_key(platform.key_id, platform.public_key)
    store.add_producer_key(producer_identity.key_id, producer_identity.public_key)
    return store


@pytest.fixture
def memory_log(trust) -> TransparencyLog:
    return TransparencyLog(log_dir=None, trust=trust)


@pytest.fixture
def env(tmp_path) -> DemoEnv:
    return provision(tmp_path / "env")


@pytest.fixture(scope="module")
def demo_env(tmp_path_factory) -> DemoEnv:
    return provision(tmp_path_factory.mktemp("demo-env"))


@pytest.fixture(scope="module")
def demo_chain(demo_env):
    return build_chain(demo_env)
