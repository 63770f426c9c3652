"""Convolutional LSTM cell with convolutional peephole connections.

Every weight application in the cell is a same-padding convolution, including
the three peephole terms that read the cell map, so the parameter count is
independent of the feature-map resolution.  Gate order per step:

    i = sigmoid(Wxi*x + Whi*h + Wci*c_prev + b_i)
    f = sigmoid(Wxf*x + Whf*h + Wcf*c_prev + b_f)
    c = f . c_prev + i . tanh(Wxc*x + Whc*h + b_c)
    o = sigmoid(Wxo*x + Who*h + Wco*c + b_o)      # peephole on the updated cell
    h = o . tanh(c)

The output-gate peephole reads the freshly updated cell map, not the previous
one; the input and forget gates read the previous one.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import ConvKernel, Tensor4, add, conv2d, dropout, multiply, sigmoid, tanh

__all__ = [
    "GATE_KERNELS",
    "ConvLSTMCell",
    "ConvLSTMState",
    "ConvLSTMStack",
]

# Kernels reading the input x, the previous hidden map h, and the cell map c.
# The four biases live on the w_x* kernels (one per gate).
GATE_KERNELS = (
    "w_xi", "w_hi", "w_ci",
    "w_xf", "w_hf", "w_cf",
    "w_xc", "w_hc",
    "w_xo", "w_ho", "w_co",
)
_X_KERNELS = ("w_xi", "w_xf", "w_xc", "w_xo")


class ConvLSTMCell:
    """One recurrent layer: eleven convolution kernels and four gate biases."""

    def __init__(self, c_in: int, hidden: int, k: int, kernels: dict[str, ConvKernel]):
        if set(kernels) != set(GATE_KERNELS):
            missing = set(GATE_KERNELS) ^ set(kernels)
            raise ValueError(f"cell kernels mismatch: {sorted(missing)}")
        for name, kn in kernels.items():
            if kn.k != k:
                raise ValueError(f"kernel {name} has size {kn.k}, cell expects {k}")
            expect_in = c_in if name in ("w_xi", "w_xf", "w_xc", "w_xo") else hidden
            if kn.c_in != expect_in or kn.c_out != hidden:
                raise ValueError(
                    f"kernel {name} has dims ({kn.c_out}, {kn.c_in}), "
                    f"expected ({hidden}, {expect_in})"
                )
            has_bias = kn.bias is not None
            if has_bias != (name in _X_KERNELS):
                raise ValueError(f"kernel {name} bias presence wrong (gate biases live on w_x*)")
        self.c_in = c_in
        self.hidden = hidden
        self.k = k
        self.kernels = kernels

    @classmethod
    def random(cls, c_in: int, hidden: int, k: int, rng: np.random.Generator,
               forget_bias: float = 1.0) -> "ConvLSTMCell":
        """Uniform +-1/sqrt(fan_in) weights; forget-gate bias warm-started."""
        kernels = {}
        for name in GATE_KERNELS:
            cin = c_in if name in _X_KERNELS else hidden
            fill = forget_bias if name == "w_xf" else 0.0
            kernels[name] = ConvKernel.random(
                hidden, cin, k, rng, with_bias=name in _X_KERNELS, bias_fill=fill
            )
        return cls(c_in, hidden, k, kernels)

    @classmethod
    def zeros(cls, c_in: int, hidden: int, k: int) -> "ConvLSTMCell":
        kernels = {
            name: ConvKernel.zeros(
                hidden, c_in if name in _X_KERNELS else hidden, k,
                with_bias=name in _X_KERNELS,
            )
            for name in GATE_KERNELS
        }
        return cls(c_in, hidden, k, kernels)

    def parameter_count(self) -> int:
        """4*hidden*c_in*k^2 + 7*hidden^2*k^2 + 4*hidden, exactly.

        The dominant term grows with (hidden*k)^2 and never with the
        feature-map height or width.
        """
        h, k2 = self.hidden, self.k * self.k
        return 4 * h * self.c_in * k2 + 7 * h * h * k2 + 4 * h

    def step(self, x: Tensor4, state: tuple[Tensor4, Tensor4]
             ) -> tuple[Tensor4, tuple[Tensor4, Tensor4]]:
        """Advance one frame; returns (h_out, (h_out, c_new))."""
        h_prev, c_prev = state
        if x.shape[0] != 1 or x.shape[1] != self.c_in:
            raise ValueError(f"step input dims {x.shape} incompatible with c_in={self.c_in}")
        expect = (1, self.hidden, x.shape[2], x.shape[3])
        if h_prev.shape != expect or c_prev.shape != expect:
            raise ValueError(
                f"state dims {h_prev.shape}/{c_prev.shape} do not match expected {expect}"
            )
        p = (self.k - 1) // 2
        kn = self.kernels

        i = sigmoid(add(add(conv2d(x, kn["w_xi"], p), conv2d(h_prev, kn["w_hi"], p)),
                        conv2d(c_prev, kn["w_ci"], p)))
        f = sigmoid(add(add(conv2d(x, kn["w_xf"], p), conv2d(h_prev, kn["w_hf"], p)),
                        conv2d(c_prev, kn["w_cf"], p)))
        cand = tanh(add(conv2d(x, kn["w_xc"], p), conv2d(h_prev, kn["w_hc"], p)))
        c_new = add(multiply(f, c_prev), multiply(i, cand))
        o = sigmoid(add(add(conv2d(x, kn["w_xo"], p), conv2d(h_prev, kn["w_ho"], p)),
                        conv2d(c_new, kn["w_co"], p)))
        h_new = multiply(o, tanh(c_new))
        return h_new, (h_new, c_new)


@dataclass
class ConvLSTMState:
    """Per-layer (hidden map, cell map) pairs; the memory carried across chunks.

    A state belongs to exactly one frame stream at a time; fresh states are
    all zeros.
    """

    layers: tuple[tuple[Tensor4, Tensor4], ...]

    @classmethod
    def zeros(cls, hidden_per_layer: list[int], h: int, w: int) -> "ConvLSTMState":
        return cls(tuple(
            (Tensor4(np.zeros((1, ch, h, w))), Tensor4(np.zeros((1, ch, h, w))))
            for ch in hidden_per_layer
        ))

    def detach(self) -> "ConvLSTMState":
        """Cut the state out of the gradient graph (truncation boundary)."""
        return ConvLSTMState(tuple((hm.detach(), cm.detach()) for hm, cm in self.layers))


class ConvLSTMStack:
    """Stacked recurrent layers with optional dropout between them."""

    def __init__(self, layers: list[ConvLSTMCell], dropout_rate: float = 0.0):
        if not layers:
            raise ValueError("stack requires at least one layer")
        if not 0.0 <= dropout_rate < 1.0:
            raise ValueError(f"dropout_rate must be in [0, 1), got {dropout_rate}")
        for lo, hi in zip(layers, layers[1:]):
            if hi.c_in != lo.hidden:
                raise ValueError(
                    f"layer chaining mismatch: hidden {lo.hidden} feeds c_in {hi.c_in}"
                )
        self.layers = list(layers)
        self.dropout_rate = dropout_rate

    @classmethod
    def random(cls, c_in: int, hidden: int, k: int, num_layers: int,
               rng: np.random.Generator, dropout_rate: float = 0.0) -> "ConvLSTMStack":
        layers = []
        cin = c_in
        for _ in range(num_layers):
            layers.append(ConvLSTMCell.random(cin, hidden, k, rng))
            cin = hidden
        return cls(layers, dropout_rate)

    def parameter_count(self) -> int:
        return sum(cell.parameter_count() for cell in self.layers)

    def fresh_state(self, h: int, w: int) -> ConvLSTMState:
        return ConvLSTMState.zeros([cell.hidden for cell in self.layers], h, w)

    def step(self, x: Tensor4, state: ConvLSTMState, training: bool = False,
             rng: np.random.Generator | None = None
             ) -> tuple[Tensor4, ConvLSTMState]:
        if len(state.layers) != len(self.layers):
            raise ValueError(
                f"state has {len(state.layers)} layers, stack has {len(self.layers)}"
            )
        use_dropout = training and self.dropout_rate > 0.0
        if use_dropout and rng is None:
            raise ValueError("training with dropout requires an rng")
        new_layers = []
        feed = x
        for idx, (cell, layer_state) in enumerate(zip(self.layers, state.layers)):
            h_out, new_state = cell.step(feed, layer_state)
            new_layers.append(new_state)
            feed = h_out
            # dropout only on hidden outputs feeding the next layer, never on
            # the carried state or the top output
            if use_dropout and idx < len(self.layers) - 1:
                feed = dropout(feed, self.dropout_rate, rng)
        return feed, ConvLSTMState(tuple(new_layers))

    def forward_sequence(self, frames: list[Tensor4], state: ConvLSTMState | None = None,
                         training: bool = False, rng: np.random.Generator | None = None
                         ) -> tuple[list[Tensor4], ConvLSTMState]:
        """Run the stack over an ordered frame list, carrying state through.

        Returns the top-layer output per frame and the final state, which the
        caller may forward into the next subsequence of the same clip.
        """
        if not frames:
            raise ValueError("forward_sequence requires a nonempty frame list")
        if state is None:
            state = self.fresh_state(frames[0].shape[2], frames[0].shape[3])
        outputs = []
        for frame in frames:
            if frame.shape != frames[0].shape:
                raise ValueError("forward_sequence frames must share dims")
            out, state = self.step(frame, state, training=training, rng=rng)
            outputs.append(out)
        return outputs, state
