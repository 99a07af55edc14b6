import pytest

from netrig.orchestrate.monolith import SingleProcessNet
from netrig.proto import ChannelParams


class Probe:
    """Scriptable stand-in component: records every inbound message with
    its arrival time and lets tests send or auto-respond."""

    def __init__(self, ctx):
        self.ctx = ctx
        self.ports = {}
        self.log = []  # (time, port_name, body)
        self.responders = {}  # msg class -> fn(probe, port_name, body)

    def port_names(self):
        return list(self.ports)

    def bind_port(self, name, port):
        self.ports[name] = port

    def start(self):
        pass

    def on_message(self, port_name, body):
        self.log.append((self.ctx.now, port_name, body))
        fn = self.responders.get(type(body))
        if fn is not None:
            fn(self, port_name, body)

    def of_type(self, cls):
        return [(t, p, b) for (t, p, b) in self.log if isinstance(b, cls)]

    def finish(self):
        return []


def build_net(*specs, channels):
    """Assemble a SingleProcessNet from (comp_id, factory) pairs and
    ((id, port), (id, port), params) channel triples, in order."""
    net = SingleProcessNet()
    comps = {}
    for comp_id, factory in specs:
        ctx = net.add_component(comp_id)
        comp = factory(ctx)
        net.register(ctx, comp)
        comps[comp_id] = comp
    for i, (a, b, params) in enumerate(channels):
        net.connect(a, b, params, f"ch{i}")
    return net, comps


@pytest.fixture
def pci_params():
    return ChannelParams(link_latency_ns=500)


@pytest.fixture
def eth_params():
    return ChannelParams(link_latency_ns=500)
