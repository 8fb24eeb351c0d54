"""Resource accounting: timing, FLOP formulas vs instrumented counts,
round metric folds."""
import pytest

from splitprompt import tensor as T
from splitprompt.model import (ModelConfig, build_model, embed, head_forward,
                               layer_forward, param_counts, partition_blocks)
from splitprompt.simnet import (CommOverhead, ComputeEvent, Link, Node,
                                ResidentEvent, RoundMetrics, SenseEvent,
                                Topology, TransmitEvent, UnknownEndpointError,
                                account_round, block_flops, compute_time,
                                distribution_bytes, embed_flops, head_flops,
                                layer_flops, layer_flops_at,
                                prompt_marginal_flops, token_bytes,
                                training_flops_per_sample, tx_time)
from splitprompt.util import rng_for

TOY = ModelConfig(n_layers=2, hidden=8, n_heads=2, n_patches=4, prompt_len=2,
                  n_classes=3, in_dim=6)

VIT_BASE_LIKE = ModelConfig(n_layers=12, hidden=768, n_heads=12, n_patches=196,
                            prompt_len=10, n_classes=5, mlp_ratio=4.0, in_dim=768)


def small_topology():
    nodes = [
        Node(id="edge0", kind="edge", compute_rate=1e10, power_compute=10.0,
             power_tx=5.0),
        Node(id="a", kind="client", compute_rate=1e9, power_compute=2.0,
             power_tx=1.0),
        Node(id="b", kind="client", compute_rate=1e9, power_compute=2.0,
             power_tx=1.0),
    ]
    links = [
        Link(kind="CS", a="a", b="edge0", bandwidth=5e7, energy_per_bit=2e-9),
        Link(kind="CS", a="b", b="edge0", bandwidth=5e7, energy_per_bit=2e-9),
        Link(kind="D2D", a="a", b="b", bandwidth=1e6, energy_per_bit=1e-9),
    ]
    return Topology(nodes, links)


class TestTiming:
    def test_tx_time_basic(self):
        link = Link(kind="D2D", a="a", b="b", bandwidth=8e6)
        assert tx_time(1e6, link) == 1.0
        assert tx_time(0, link) == 0.0

    def test_smashed_hop_time(self):
        link = Link(kind="D2D", a="a", b="b", bandwidth=1e6)
        assert tx_time(320, link) == pytest.approx(2.56e-3)

    def test_compute_time(self):
        node = Node(id="n", kind="client", compute_rate=1e9)
        assert compute_time(1e9, node) == 1.0

    def test_negative_rejected(self):
        with pytest.raises(ValueError):
            tx_time(-1, Link(kind="D2D", a="a", b="b", bandwidth=1.0))


class TestFlopFormulas:
    def test_layer_forward_matches_instrumented_count(self):
        for prompt_len in (0, 2):
            cfg = ModelConfig(n_layers=1, hidden=8, n_heads=2, n_patches=4,
                              prompt_len=prompt_len, n_classes=3, in_dim=6)
            model = build_model(cfg, seed=1)
            tokens = rng_for(2, "t").standard_normal((5, 8))
            with T.count_macs() as box:
                layer_forward(model, 1, tokens)
            assert box[0] == layer_flops(cfg)

    def test_embed_and_head_match_instrumented_count(self):
        model = build_model(TOY, seed=3)
        feats = rng_for(4, "f").standard_normal((4, 6))
        with T.count_macs() as box:
            tokens = embed(model, feats)
        assert box[0] == embed_flops(TOY)
        with T.count_macs() as box:
            head_forward(model, tokens[0])
        assert box[0] == head_flops(TOY)

    def test_backward_convention_is_twice_forward(self):
        block = partition_blocks(2, 1)[0]
        assert block_flops(block, TOY, "backward") == 2 * block_flops(block, TOY,
                                                                      "forward")

    def test_prompt_marginal_positive(self):
        assert prompt_marginal_flops(TOY) == layer_flops(TOY) - layer_flops_at(TOY, 0)
        assert prompt_marginal_flops(TOY) > 0

    def test_training_flops_frozen_well_below_full(self):
        cfg = ModelConfig(n_layers=2, hidden=16, n_heads=2, n_patches=16,
                          prompt_len=2, n_classes=5, in_dim=16)
        frozen = training_flops_per_sample(cfg, frozen_backbone=True)
        full = training_flops_per_sample(cfg, frozen_backbone=False)
        assert frozen < 0.25 * full

    def test_distribution_bytes_ratio(self):
        efficient = distribution_bytes(VIT_BASE_LIKE, parameter_efficient=True)
        full = distribution_bytes(VIT_BASE_LIKE, parameter_efficient=False)
        counts = param_counts(VIT_BASE_LIKE)
        assert efficient == counts.tunable * 8
        assert full == counts.total * 8
        assert efficient / full == pytest.approx(96005 / 85741829)

    def test_efficient_delivery_always_smaller(self):
        rng = rng_for(5, "cfgs")
        for _ in range(20):
            cfg = ModelConfig(n_layers=int(rng.integers(1, 6)),
                              hidden=int(rng.integers(1, 4)) * 4,
                              n_heads=1,
                              n_patches=int(rng.integers(1, 8)),
                              prompt_len=int(rng.integers(0, 4)),
                              n_classes=int(rng.integers(2, 6)))
            assert distribution_bytes(cfg, True) < distribution_bytes(cfg, False)


class TestAccountRound:
    def test_empty_trace_all_zero(self):
        metrics = account_round("finetune", [], small_topology())
        assert metrics.latency_s == 0.0
        assert metrics.compute_flops == 0.0
        assert metrics.energy_j == 0.0
        assert metrics.comm.total_bytes == 0.0
        assert metrics.peak_memory == {}

    def test_parallel_groups_take_max_latency_but_add_costs(self):
        topo = small_topology()
        events = []
        for gid, node in (("g1", "a"), ("g2", "b")):
            events.append(ComputeEvent(node=node, flops=2e9, group=gid))
            events.append(TransmitEvent(src=node, dst="edge0", link_kind="CS",
                                        bytes=1000, payload="params", group=gid))
        metrics = account_round("finetune", events, topo)
        one_cluster = account_round("finetune", events[:2], topo)
        assert metrics.latency_s == pytest.approx(one_cluster.latency_s)
        assert metrics.compute_flops == pytest.approx(2 * one_cluster.compute_flops)
        assert metrics.energy_j == pytest.approx(2 * one_cluster.energy_j)
        assert metrics.comm.cs_bytes == 2000

    def test_serial_events_add_to_latency(self):
        topo = small_topology()
        events = [ComputeEvent(node="a", flops=1e9, group="g1"),
                  ComputeEvent(node="edge0", flops=1e10, group=None)]
        metrics = account_round("finetune", events, topo)
        assert metrics.latency_s == pytest.approx(1.0 + 1.0)

    def test_gradient_bytes_excluded_from_comm_by_default(self):
        topo = small_topology()
        events = [TransmitEvent(src="a", dst="b", link_kind="D2D", bytes=400,
                                payload="gradient", group="g")]
        off = account_round("finetune", events, topo)
        on = account_round("finetune", events, topo, count_gradient_comm=True)
        assert off.comm.d2d_bytes == 0.0
        assert on.comm.d2d_bytes == 400.0
        assert off.energy_j == on.energy_j        # physics unchanged
        assert off.latency_s == on.latency_s

    def test_peak_memory_params_plus_buffers(self):
        topo = small_topology()
        events = [ResidentEvent(node="a", bytes=1000, group="g"),
                  TransmitEvent(src="a", dst="b", link_kind="D2D", bytes=960,
                                payload="tokens", unit_bytes=320, group="g")]
        fine = account_round("finetune", events, topo)
        infer = account_round("inference", events, topo)
        assert fine.peak_memory["a"] == 1000 + 2 * 320
        assert infer.peak_memory["a"] == 1000 + 1 * 320
        assert infer.peak_memory["a"] <= fine.peak_memory["a"]

    def test_bandwidth_scaling_divides_transmission_times(self):
        k = 4.0
        base_nodes = [Node(id="edge0", kind="edge", compute_rate=1e10),
                      Node(id="a", kind="client", compute_rate=1e9),
                      Node(id="b", kind="client", compute_rate=1e9)]
        events = [TransmitEvent(src="a", dst="b", link_kind="D2D", bytes=4000,
                                payload="tokens", group="g")]

        def links(scale):
            return [Link(kind="D2D", a="a", b="b", bandwidth=1e6 * scale)]

        slow = account_round("finetune", events, Topology(base_nodes, links(1)))
        fast = account_round("finetune", events, Topology(base_nodes, links(k)))
        assert slow.comm.channel_seconds == k * fast.comm.channel_seconds
        assert slow.latency_s == k * fast.latency_s

    def test_unknown_link_raises(self):
        topo = small_topology()
        events = [TransmitEvent(src="a", dst="b", link_kind="CS", bytes=1,
                                payload="params")]
        with pytest.raises(UnknownEndpointError):
            account_round("finetune", events, topo)

    def test_sense_event_contributes_time_and_energy(self):
        topo = small_topology()
        metrics = account_round("finetune",
                                [SenseEvent(node="a", seconds=0.5, group="g")],
                                topo)
        assert metrics.latency_s == 0.5
        assert metrics.energy_j == pytest.approx(2.0 * 0.5)

    def test_additivity_over_disjoint_subtraces(self):
        topo = small_topology()
        ev1 = [ComputeEvent(node="a", flops=1e9, group="g1")]
        ev2 = [TransmitEvent(src="a", dst="b", link_kind="D2D", bytes=500,
                             payload="tokens", group="g2")]
        whole = account_round("finetune", ev1 + ev2, topo)
        part1 = account_round("finetune", ev1, topo)
        part2 = account_round("finetune", ev2, topo)
        assert whole.compute_flops == part1.compute_flops + part2.compute_flops
        assert whole.energy_j == pytest.approx(part1.energy_j + part2.energy_j)
        assert whole.comm.total_bytes == (part1.comm.total_bytes
                                          + part2.comm.total_bytes)
        # latency is max over parallel groups, not a sum
        assert whole.latency_s == max(part1.latency_s, part2.latency_s)


class TestTypes:
    def test_node_validation(self):
        with pytest.raises(ValueError):
            Node(id="x", kind="client", compute_rate=0.0)
        with pytest.raises(ValueError):
            Node(id="x", kind="router", compute_rate=1.0)

    def test_link_validation(self):
        with pytest.raises(ValueError):
            Link(kind="D2D", a="a", b="b", bandwidth=0.0)
        with pytest.raises(ValueError):
            Link(kind="XX", a="a", b="b", bandwidth=1.0)

    def test_topology_rejects_d2d_to_edge(self):
        nodes = [Node(id="e", kind="edge", compute_rate=1.0),
                 Node(id="c", kind="client", compute_rate=1.0)]
        with pytest.raises(ValueError):
            Topology(nodes, [Link(kind="D2D", a="c", b="e", bandwidth=1.0)])

    def test_metrics_validation(self):
        with pytest.raises(ValueError):
            RoundMetrics(model_performance=1.5, latency_s=0, compute_flops=0,
                         energy_j=0, comm=CommOverhead())
        with pytest.raises(ValueError):
            RoundMetrics(model_performance=0.5, latency_s=-1, compute_flops=0,
                         energy_j=0, comm=CommOverhead())

    def test_token_bytes_formula(self):
        assert token_bytes(TOY) == (1 + TOY.n_patches) * TOY.hidden * 8
