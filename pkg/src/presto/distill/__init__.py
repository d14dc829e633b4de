from .layer import (
    D3_BUDGETS, REDUCED_BUDGETS, DropSchedule, PrestoLConfig, drop_set, executed_layers,
    presto_l_step, quintile, scale_budgets, self_teacher_loss,
)
from .ls import LsPipelineConfig, LsResult, run_pipeline
from .step import (
    CHOSEN_ROUTING, ROUTING_GRID_LS, ROUTING_GRID_NS, DiscriminatorHead, GeneratorCollapse,
    PrestoSConfig, PrestoSState, Routing, dmd_signal, fake_dsm_update, gan_losses, generator_output,
    make_state, presto_s_iteration, train_presto_s,
)
