"""Small encoder/decoder stacks used by the desk-scale experiments."""
from __future__ import annotations

import numpy as np

from .autodiff import Node, Tape


class MLPAutoencoder:
    """Two-layer tanh autoencoder. The default desk-scale task quantizes the
    bottleneck of a 16 -> 32 -> 8 -> 32 -> 16 reconstruction network."""

    def __init__(self, d_in: int = 16, hidden: int = 32, d_code: int = 8,
                 rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.d_in, self.hidden, self.d_code = d_in, hidden, d_code

        def init(fan_in, fan_out):
            return rng.normal(0.0, 1.0 / np.sqrt(fan_in), size=(fan_in, fan_out))

        self.params: dict[str, np.ndarray] = {
            "enc_w1": init(d_in, hidden),
            "enc_b1": np.zeros((1, hidden)),
            "enc_w2": init(hidden, d_code),
            "enc_b2": np.zeros((1, d_code)),
            "dec_w1": init(d_code, hidden),
            "dec_b1": np.zeros((1, hidden)),
            "dec_w2": init(hidden, d_in),
            "dec_b2": np.zeros((1, d_in)),
        }

    encoder_param_names = ("enc_w1", "enc_b1", "enc_w2", "enc_b2")
    decoder_param_names = ("dec_w1", "dec_b1", "dec_w2", "dec_b2")

    def make_nodes(self, tape: Tape, trainable=None) -> dict[str, Node]:
        """Register parameters on a tape. `trainable` limits which names become
        parameter leaves; the rest are plain constants."""
        nodes = {}
        for name, value in self.params.items():
            is_param = trainable is None or name in trainable
            nodes[name] = tape.leaf(value, param=is_param, name=name)
        return nodes

    def encode(self, tape: Tape, x: Node, nodes: dict[str, Node]) -> Node:
        h = tape.tanh(tape.add(tape.matmul(x, nodes["enc_w1"]), nodes["enc_b1"]))
        return tape.add(tape.matmul(h, nodes["enc_w2"]), nodes["enc_b2"])

    def decode(self, tape: Tape, z: Node, nodes: dict[str, Node]) -> Node:
        h = tape.tanh(tape.add(tape.matmul(z, nodes["dec_w1"]), nodes["dec_b1"]))
        return tape.add(tape.matmul(h, nodes["dec_w2"]), nodes["dec_b2"])


class LinearEncoderIdentityDecoder:
    """Linear encoder, identity decoder. The gradient gap of this model has a
    closed form, which the tests exploit as an oracle."""

    def __init__(self, d_in: int, d_code: int, rng: np.random.Generator | None = None):
        rng = rng or np.random.default_rng(0)
        self.params = {"enc_w": rng.normal(0.0, 1.0 / np.sqrt(d_in), size=(d_in, d_code))}

    encoder_param_names = ("enc_w",)
    decoder_param_names = ()

    def make_nodes(self, tape: Tape, trainable=None) -> dict[str, Node]:
        nodes = {}
        for name, value in self.params.items():
            is_param = trainable is None or name in trainable
            nodes[name] = tape.leaf(value, param=is_param, name=name)
        return nodes

    def encode(self, tape: Tape, x: Node, nodes: dict[str, Node]) -> Node:
        return tape.matmul(x, nodes["enc_w"])

    def decode(self, tape: Tape, z: Node, nodes: dict[str, Node]) -> Node:
        return z
