"""Desk-scale simulator of federated source-free domain adaptation with server/client alignment."""
from __future__ import annotations

from .adaptation import BMDState, PrototypeSet, PseudoLabelTable, SCAlConfig, ThresholdState
from .data import AugmentationConfig, ClientDataset, DomainSpec, GeometryConfig, build_federation, make_domain_specs
from .federation import FederationConfig, RoundRecord, ServerState, run_federation, server_aggregate
from .harness import ExperimentConfig, load_config, run_experiment
from .model import ModelParams, forward, loss_and_encoder_grad, pretrain_source

__version__ = "0.1.0"
