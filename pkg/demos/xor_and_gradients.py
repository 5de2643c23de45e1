"""Why depth matters: a hidden layer solves XOR, a linear softmax cannot.

Also runs the finite-difference gradient suite so the numbers below can be
trusted.  Takes a few seconds.
"""
import numpy as np

from deepbiz import autodiff as ad
from deepbiz import gradient_suite
from deepbiz import layers as ly
from deepbiz.optim import Adam

X = np.array([[0, 0], [0, 1], [1, 0], [1, 1]], dtype=float)
Y = np.array([0, 1, 1, 0])


def train(net, steps):
    opt, params = Adam(0.01), net.parameters()
    for _ in range(steps):
        loss = ad.softmax_cross_entropy(net.forward(X, "train", rng=0), Y)
        opt.step(params, ad.backward(loss.tape, loss))
    return int((net.predict(X).argmax(axis=1) != Y).sum())


if __name__ == "__main__":
    worst = max(gradient_suite.run_suite(0).values())
    print(f"gradient suite: worst relative error {worst:.1e}")
    print("hidden layer of 4 ReLUs, errors after 2000 steps:",
          train(ly.mlp(2, [4], 2, "relu", task="classification", rng=0), 2000))
    print("linear softmax, errors after 2000 steps:",
          train(ly.Network([ly.Dense(2, 2, "linear", 0)], task="classification"), 2000))
