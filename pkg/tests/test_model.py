"""Tests for the backbone, conversion, routing, stripping, and checkpoints."""

import dataclasses

import pytest
import torch
from torch import nn

from dgseg.model import (
    AggregatedNorm2d,
    ArchSpec,
    CheckpointError,
    RoutingContext,
    UNet,
    convert_model,
    forward_routed,
    load_checkpoint,
    norm_sites,
    parameter_counts,
    save_checkpoint,
    strip_individual_branches,
)
from dgseg.norm import ForwardMode, MultiBranchNorm2d


def small_spec():
    return ArchSpec(in_channels=1, n_classes=2, widths=(4, 8))


def if_ctx(d=1, update_stats=True):
    return RoutingContext(ForwardMode.INDIVIDUAL, domain_id=d, update_stats=update_stats)


def af_ctx(update_stats=True):
    return RoutingContext(ForwardMode.AGGREGATED, update_stats=update_stats)


class TestUNet:
    def test_output_shape(self):
        net = UNet(small_spec())
        out = net(torch.randn(2, 1, 16, 16))
        assert out.shape == (2, 2, 16, 16)

    def test_reference_parameter_count(self):
        net = UNet(ArchSpec(in_channels=1, n_classes=2, widths=(16, 32, 64, 128)))
        assert sum(p.numel() for p in net.parameters()) == 482_466

    def test_rejects_indivisible_size(self):
        net = UNet(ArchSpec(widths=(4, 8, 16)))
        with pytest.raises(ValueError, match="not divisible"):
            net(torch.randn(1, 1, 10, 10))

    def test_arch_validation(self):
        with pytest.raises(ValueError, match="n_classes"):
            ArchSpec(n_classes=1)
        with pytest.raises(ValueError, match="two stages"):
            ArchSpec(widths=(8,))
        with pytest.raises(ValueError, match="in_channels"):
            ArchSpec(in_channels=0)


class TestRoutingContext:
    def test_individual_requires_domain(self):
        with pytest.raises(ValueError, match="requires a domain"):
            RoutingContext(ForwardMode.INDIVIDUAL)
        with pytest.raises(ValueError, match="requires a domain"):
            RoutingContext(ForwardMode.RANDOM)

    def test_aggregated_rejects_domain(self):
        with pytest.raises(ValueError, match="domain-agnostic"):
            RoutingContext(ForwardMode.AGGREGATED, domain_id=1)

    def test_rand_p_range(self):
        with pytest.raises(ValueError, match="rand_p"):
            RoutingContext(ForwardMode.RANDOM, domain_id=1, rand_p=1.2)


class TestConvert:
    def test_replaces_every_bn(self):
        net = UNet(small_spec())
        n_bn = sum(isinstance(m, nn.BatchNorm2d) for m in net.modules())
        assert n_bn > 0
        convert_model(net, n_domains=3)
        assert sum(isinstance(m, nn.BatchNorm2d) for m in net.modules()) == 0
        assert len(norm_sites(net)) == n_bn

    def test_double_conversion_rejected(self):
        net = convert_model(UNet(small_spec()), 2)
        with pytest.raises(ValueError, match="already converted"):
            convert_model(net, 2)

    def test_no_norm_layers_rejected(self):
        with pytest.raises(ValueError, match="no BatchNorm2d"):
            convert_model(nn.Conv2d(1, 1, 3), 2)

    def test_branches_inherit_source_parameters(self):
        net = UNet(small_spec())
        bn = next(m for m in net.modules() if isinstance(m, nn.BatchNorm2d))
        with torch.no_grad():
            bn.weight.fill_(2.5)
            bn.running_mean.fill_(0.7)
        convert_model(net, 3)
        site = norm_sites(net)[0]
        for branch in list(site.individual) + [site.aggregated]:
            assert torch.all(branch.gamma == 2.5)
            assert torch.all(branch.running_mean == 0.7)

    def test_momentum_translation(self):
        net = convert_model(UNet(small_spec()), 2, momentum=0.1)
        for site in norm_sites(net):
            assert site.aggregated.running_momentum == pytest.approx(0.1)

    def test_single_domain_individual_matches_unconverted(self):
        # A converted model routed through its sole individual branch must
        # reproduce the plain model bit-for-bit in both train and eval mode.
        torch.manual_seed(1)
        plain = UNet(small_spec())
        converted = convert_model(
            __import__("copy").deepcopy(plain), n_domains=1
        )
        x = torch.randn(2, 1, 16, 16)
        plain.train()
        converted.train()
        out_plain = plain(x)
        out_conv = forward_routed(converted, x, if_ctx(1))
        assert torch.allclose(out_plain, out_conv, atol=1e-6)
        plain.eval()
        converted.eval()
        x2 = torch.randn(2, 1, 16, 16)
        assert torch.allclose(
            plain(x2), forward_routed(converted, x2, if_ctx(1)), atol=1e-6
        )


class TestForwardRouted:
    def test_requires_converted_model(self):
        net = UNet(small_spec())
        with pytest.raises(ValueError, match="convert_model"):
            forward_routed(net, torch.randn(1, 1, 16, 16), af_ctx())

    def test_route_cleared_after_success(self):
        net = convert_model(UNet(small_spec()), 2)
        forward_routed(net, torch.randn(1, 1, 16, 16), af_ctx())
        assert all(site._route is None for site in norm_sites(net))

    def test_route_cleared_after_failure(self):
        net = convert_model(UNet(small_spec()), 2)
        with pytest.raises(ValueError):
            forward_routed(net, torch.randn(1, 1, 9, 9), af_ctx())
        assert all(site._route is None for site in norm_sites(net))

    def test_domain_branches_differ_after_divergence(self):
        net = convert_model(UNet(small_spec()), 2)
        site = norm_sites(net)[0]
        with torch.no_grad():
            site.individual[1].beta.add_(3.0)
        net.eval()
        x = torch.randn(1, 1, 16, 16)
        out1 = forward_routed(net, x, if_ctx(1))
        out2 = forward_routed(net, x, if_ctx(2))
        assert not torch.allclose(out1, out2)

    def test_random_forward_runs(self):
        net = convert_model(UNet(small_spec()), 3)
        gen = torch.Generator().manual_seed(0)
        ctx = RoutingContext(
            ForwardMode.RANDOM, domain_id=2, rand_p=0.8, rng=gen, update_stats=False
        )
        out = forward_routed(net, torch.randn(2, 1, 16, 16), ctx)
        assert torch.isfinite(out).all()


class TestStrip:
    def test_aggregated_forward_preserved(self):
        net = convert_model(UNet(small_spec()), 3)
        net.eval()
        x = torch.randn(2, 1, 16, 16)
        # Push running stats off their init so eval mode is non-trivial.
        net.train()
        forward_routed(net, torch.randn(4, 1, 16, 16) * 2 + 1, af_ctx())
        net.eval()
        full = forward_routed(net, x, af_ctx())
        stripped = strip_individual_branches(net)
        stripped.eval()
        assert torch.allclose(full, stripped(x), atol=1e-6)

    def test_original_untouched(self):
        net = convert_model(UNet(small_spec()), 3)
        strip_individual_branches(net)
        assert len(norm_sites(net)) > 0

    def test_stripped_has_fewer_parameters(self):
        net = convert_model(UNet(small_spec()), 4)
        counts = parameter_counts(net)
        assert counts["inference"] < counts["train"]
        # Each site drops K branches of (gamma, beta) pairs.
        dropped = sum(4 * 2 * s.channels for s in norm_sites(net))
        assert counts["train"] - counts["inference"] == dropped

    def test_unconverted_counts_equal(self):
        net = UNet(small_spec())
        counts = parameter_counts(net)
        assert counts["train"] == counts["inference"]

    def test_strip_requires_converted(self):
        with pytest.raises(ValueError, match="nothing to strip"):
            strip_individual_branches(UNet(small_spec()))

    def test_stripped_needs_no_route(self):
        stripped = strip_individual_branches(convert_model(UNet(small_spec()), 2))
        stripped.eval()
        out = stripped(torch.randn(1, 1, 16, 16))
        assert out.shape == (1, 2, 16, 16)


class TestCheckpoint:
    def test_round_trip_full_model(self, tmp_path):
        net = convert_model(UNet(small_spec()), 3)
        net.train()
        forward_routed(net, torch.randn(2, 1, 16, 16), if_ctx(2))
        path = tmp_path / "model.pt"
        save_checkpoint(path, net, small_spec(), 3)
        loaded, meta = load_checkpoint(path)
        assert meta["n_domains"] == 3
        assert not meta["stripped"]
        net.eval()
        loaded.eval()
        x = torch.randn(1, 1, 16, 16)
        assert torch.allclose(
            forward_routed(net, x, af_ctx()), forward_routed(loaded, x, af_ctx())
        )

    def test_round_trip_stripped_model(self, tmp_path):
        net = convert_model(UNet(small_spec()), 3)
        stripped = strip_individual_branches(net)
        path = tmp_path / "stripped.pt"
        save_checkpoint(path, stripped, small_spec(), 3)
        loaded, meta = load_checkpoint(path)
        assert meta["stripped"]
        stripped.eval()
        loaded.eval()
        x = torch.randn(1, 1, 16, 16)
        assert torch.allclose(stripped(x), loaded(x))

    def test_domain_mismatch_detected(self, tmp_path):
        net = convert_model(UNet(small_spec()), 3)
        path = tmp_path / "model.pt"
        save_checkpoint(path, net, small_spec(), 3)
        with pytest.raises(CheckpointError, match="n_domains mismatch"):
            load_checkpoint(path, expect_domains=4)

    def test_garbage_file_rejected(self, tmp_path):
        path = tmp_path / "bad.pt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError, match="unreadable"):
            load_checkpoint(path)

    def test_missing_key_named(self, tmp_path):
        path = tmp_path / "odd.pt"
        torch.save({"format_version": 1, "arch": dataclasses.asdict(small_spec())}, path)
        with pytest.raises(CheckpointError, match="n_domains"):
            load_checkpoint(path)

    def test_wrong_version_rejected(self, tmp_path):
        path = tmp_path / "v9.pt"
        torch.save({"format_version": 9}, path)
        with pytest.raises(CheckpointError, match="format_version 9"):
            load_checkpoint(path)


class TestAggregatedNorm2d:
    def test_is_module_with_shared_surface(self):
        site = MultiBranchNorm2d(4, 2)
        layer = AggregatedNorm2d(site)
        assert layer.channels == 4
        assert layer.eps == site.eps
        out = layer(torch.randn(2, 4, 8, 8))
        assert out.shape == (2, 4, 8, 8)
