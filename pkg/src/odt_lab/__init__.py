"""Return-conditioned transformer policies with online entropy-regularized finetuning.

The package is organized around one module per pipeline stage:

- :mod:`odt_lab.rng`         named deterministic random substreams
- :mod:`odt_lab.trajectory`  trajectory data model, return-to-go arithmetic, windows
- :mod:`odt_lab.replay`      trajectory-level replay buffer and two-stage sampling
- :mod:`odt_lab.envs`        self-contained toy environments plus scripted experts
- :mod:`odt_lab.policy`      causal-transformer Gaussian policy and checkpoints
- :mod:`odt_lab.train`       losses, optimizers, temperature dual, training steps
- :mod:`odt_lab.pipeline`    pretrain / finetune / evaluate orchestration
- :mod:`odt_lab.cli`         the ``odt-lab`` command line entry point
"""

__version__ = "0.1.0"
