"""
测试共享夹具：随仓库发布的网络、器件、架构配置和小型网络构造器
"""
import os
import sys

import numpy as np
import pytest

ROOT = os.path.dirname(os.path.dirname(os.path.abspath(__file__)))
if ROOT not in sys.path:
    sys.path.insert(0, ROOT)

from arch_model import load_arch, load_device  # noqa: E402
from network_ir import Activation, LayerDef, NetworkDef, load_network, validate_network  # noqa: E402

FIXTURES = os.path.join(ROOT, "tests", "fixtures")


@pytest.fixture(scope="session")
def repo_root():
    return ROOT


@pytest.fixture(scope="session")
def fixtures_dir():
    return FIXTURES


@pytest.fixture(scope="session")
def ecg_net():
    return load_network(os.path.join(ROOT, "networks", "ecg.json"))


@pytest.fixture(scope="session")
def res_tcn_net():
    return load_network(os.path.join(ROOT, "networks", "res_tcn.json"))


@pytest.fixture(scope="session")
def wn_net():
    return load_network(os.path.join(ROOT, "networks", "wn_pnt.json"))


@pytest.fixture(scope="session")
def benchmarks(ecg_net, res_tcn_net, wn_net):
    return {"ecg": ecg_net, "res_tcn": res_tcn_net, "wn_pnt": wn_net}


@pytest.fixture(scope="session")
def z7020():
    return load_device(os.path.join(ROOT, "devices", "z7020.json"))


@pytest.fixture(scope="session")
def zu3eg():
    return load_device(os.path.join(ROOT, "devices", "zu3eg.json"))


@pytest.fixture(scope="session")
def arch_12x4():
    return load_arch(os.path.join(ROOT, "archs", "z7020_12x4.json"))


@pytest.fixture(scope="session")
def arch_11x5():
    return load_arch(os.path.join(ROOT, "archs", "z7020_11x5.json"))


@pytest.fixture(scope="session")
def arch_9x10():
    return load_arch(os.path.join(ROOT, "archs", "zu3eg_9x10.json"))


@pytest.fixture
def make_net():
    """按 (in_ch, out_ch, k, d, s) 元组或关键字字典构造并验证网络"""

    def build(specs, input_channels=None, name="toy", sample_rate_hz=None):
        layers = []
        for lid, spec in enumerate(specs):
            if isinstance(spec, dict):
                fields = {"dilation": 1, "stride": 1, **spec}
                layers.append(LayerDef(id=lid, **fields))
            else:
                in_ch, out_ch, k, d, s = spec
                layers.append(LayerDef(id=lid, in_channels=in_ch, out_channels=out_ch,
                                       kernel_size=k, dilation=d, stride=s,
                                       activation=Activation.RELU))
        net = NetworkDef(
            name=name,
            input_channels=input_channels or layers[0].in_channels,
            layers=tuple(layers),
            sample_rate_hz=sample_rate_hz,
        )
        validate_network(net)
        return net

    return build


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)
