"""Mean-field two-layer ReLU student-teacher transfer."""
from .kernels import BACKEND
from .model import (
    KernelGrams, Projection, ReluExperiment, ReluNet, ReluTrainConfig, TeacherPair,
    arccos_kernel, generalization_error, gram_matrices, init_student, l2_inner_product,
    make_teacher_pair, nested_teacher_pairs, phase_boundary_predict, population_loss_relu,
    power_law_fit, probe_transfer, projection_norms, relu_transferability, sample_relu_dataset,
    target_variance, train_relu, PopulationObjective, EmpiricalObjective,
)
