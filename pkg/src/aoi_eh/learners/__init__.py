"""Model-free learners: they touch the environment only through ``step`` and feasibility masks."""
from .dqn import (Adam, DqnHyper, MLP, NetworkPolicy, ReplayBuffer, dqn_learn, dqn_loss_grad,
                  dqn_td_error, huber_loss)
from .fdpg import FdpgHyper, ThresholdParams, fdpg_gradient_estimate, fdpg_learn
from .gr import GrHyper, GrState, LearnResult, gr_learn, gr_q_update, schedules_satisfy_conditions

__all__ = ["Adam", "DqnHyper", "MLP", "NetworkPolicy", "ReplayBuffer", "dqn_learn",
           "dqn_loss_grad", "dqn_td_error", "huber_loss", "FdpgHyper", "ThresholdParams",
           "fdpg_gradient_estimate", "fdpg_learn", "GrHyper", "GrState", "LearnResult", "gr_learn",
           "gr_q_update", "schedules_satisfy_conditions"]
