"""One-pass guidance distillation with a pluggable negative-prompt adapter.

A small, self-contained study setup: numpy-backed autodiff, a cross-
attention U-Net denoiser on synthetic 16x16 images, DDIM sampling, and the
training/evaluation pipeline for distilling two-pass guided sampling into
a single pass via a decoupled negative-prompt adapter.
"""

from .adapter import GuidanceAdapter, StudentModel, attention_normalize, combine_features, plug_into
from .autodiff import Tensor, backward, no_grad
from .data import Dataset, DatasetSpec, attribute_oracle, make_dataset, render
from .distill import DistillConfig, cfg_distill_loss, msc_loss, msc_rollout, total_loss, train_adapter
from .metrics import kd_consistency, msc_ablation, negative_control_eval, sliced_wasserstein
from .optim import AdamW
from .prompts import PromptEncoder, make_prompt, parse_prompt, prompt_to_text, sample_negative_prompt
from .sampling import SampleTrace, bench, sample_set, sample_student, sample_teacher_cfg
from .schedule import CosineSchedule, add_noise, ddim_step, pseudo_epsilon
from .training import TeacherConfig, finetune_teacher, train_teacher
from .unet import TeacherModel, cfg_combine

__version__ = "0.1.0"
