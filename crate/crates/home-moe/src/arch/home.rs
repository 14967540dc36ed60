//! Two-layer hierarchy of multi-gate experts.
//!
//! Layer 1 builds three meta expert groups (shared, interaction, watch),
//! each mixed by its own gate: the category gates span {shared-group,
//! own-category} experts, the shared gate spans all three groups. Layer 2
//! refines the meta representations with global-shared experts (fed the
//! shared meta representation), in-category shared experts, and one
//! specific expert group per task; each task's gate reads the concatenation
//! of its category and shared meta representations.
//!
//! Three switchable mechanisms ride on top: low-rank feature gates
//! privatize each group's input (layer 1 on the raw features, layer 2 on
//! the meta representations), residual self-gates re-mix each group's own
//! experts and add the result back, and the hierarchy mask restricts which
//! experts each gate sees. With the mask off every gate spans the whole
//! layer's expert pool.

use super::{
    Architecture, ExpertRole, ExpertTrace, ForwardTrace, GateScope, GateTrace, ModelConfig,
    ModelError, TaskCategory, TaskSpec,
};
use crate::layers::{Binding, ExpertUnit, FeaGate, GateKind, GateUnit, Param, ParamCtx, TowerUnit};
use crate::tape::{BnState, Mode, Tape, Var};
use crate::tensor::Tensor;

const GROUPS: [&str; 3] = ["shared", "inter", "watch"];
const SHARED: usize = 0;
const INTER: usize = 1;
const WATCH: usize = 2;

fn group_of(cat: TaskCategory) -> usize {
    match cat {
        TaskCategory::Interaction => INTER,
        TaskCategory::Watch => WATCH,
    }
}

pub struct HomeModel {
    cfg: ModelConfig,
    tasks: Vec<TaskSpec>,
    fg1: Option<Vec<FeaGate>>,
    meta: Vec<Vec<ExpertUnit>>,
    meta_gates: Vec<GateUnit>,
    sg1: Option<Vec<GateUnit>>,
    fg2: Option<Vec<FeaGate>>,
    fg2_task: Option<Vec<FeaGate>>,
    l2_groups: Vec<Vec<ExpertUnit>>,
    l2_task: Vec<Vec<ExpertUnit>>,
    task_gates: Vec<GateUnit>,
    sg2: Option<Vec<GateUnit>>,
    towers: Vec<TowerUnit>,
    param_len: usize,
}

pub(super) fn build(
    cfg: &ModelConfig,
    tasks: &[TaskSpec],
) -> Result<Box<dyn Architecture>, ModelError> {
    let mut ctx = ParamCtx::new(cfg.seed);
    let e = cfg.experts_per_group;
    let (v, d) = (cfg.input_width, cfg.expert_width);

    let new_expert = |ctx: &mut ParamCtx, prefix: &str, input: usize| {
        ExpertUnit::new(
            ctx,
            prefix,
            input,
            &cfg.expert_hidden,
            d,
            cfg.expert_activation,
            cfg.expert_normalize,
            cfg.allow_norm_relu,
        )
    };

    let fg1 = if cfg.use_feature_gate_layer1 {
        Some(
            GROUPS
                .iter()
                .map(|g| {
                    FeaGate::new(
                        &mut ctx,
                        &format!("fg1.{g}"),
                        v,
                        cfg.lora_count,
                        &cfg.gate_hidden,
                        cfg.head_init(),
                    )
                })
                .collect::<Result<Vec<_>, _>>()?,
        )
    } else {
        None
    };

    let meta = GROUPS
        .iter()
        .map(|g| {
            (0..e)
                .map(|i| new_expert(&mut ctx, &format!("l1.{g}.e{i}"), v))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;

    // Category gates see {shared, own}; the shared gate sees everything.
    // Without the mask, every gate sees the whole meta pool.
    let meta_arity = |group: usize| {
        if cfg.use_hierarchy_mask && group != SHARED {
            2 * e
        } else {
            3 * e
        }
    };
    let meta_gates = GROUPS
        .iter()
        .enumerate()
        .map(|(gi, g)| {
            GateUnit::new(
                &mut ctx,
                &format!("gate.meta.{g}"),
                v,
                &cfg.gate_hidden,
                meta_arity(gi),
                GateKind::Softmax,
                cfg.head_init(),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;

    let sg1 = if cfg.use_self_gate {
        Some(
            GROUPS
                .iter()
                .map(|g| {
                    GateUnit::new_self_gate(
                        &mut ctx,
                        &format!("sg.meta.{g}"),
                        v,
                        &cfg.gate_hidden,
                        e,
                        cfg.head_init(),
                    )
                })
                .collect::<Result<Vec<_>, _>>()?,
        )
    } else {
        None
    };

    let (fg2, fg2_task) = if cfg.use_feature_gate_layer2 {
        let groups = GROUPS
            .iter()
            .map(|g| {
                FeaGate::new(
                    &mut ctx,
                    &format!("fg2.{g}"),
                    d,
                    cfg.lora_count,
                    &cfg.gate_hidden,
                    cfg.head_init(),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        let per_task = tasks
            .iter()
            .map(|t| {
                FeaGate::new(
                    &mut ctx,
                    &format!("fg2.task.{}", t.name),
                    d,
                    cfg.lora_count,
                    &cfg.gate_hidden,
                    cfg.head_init(),
                )
            })
            .collect::<Result<Vec<_>, _>>()?;
        (Some(groups), Some(per_task))
    } else {
        (None, None)
    };

    let l2_groups = GROUPS
        .iter()
        .map(|g| {
            (0..e)
                .map(|i| new_expert(&mut ctx, &format!("l2.{g}.e{i}"), d))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;
    let l2_task = tasks
        .iter()
        .map(|t| {
            (0..e)
                .map(|i| new_expert(&mut ctx, &format!("l2.task.{}.e{i}", t.name), d))
                .collect::<Result<Vec<_>, _>>()
        })
        .collect::<Result<Vec<_>, _>>()?;

    let task_arity = if cfg.use_hierarchy_mask {
        3 * e
    } else {
        (3 + tasks.len()) * e
    };
    let task_gates = tasks
        .iter()
        .map(|t| {
            GateUnit::new(
                &mut ctx,
                &format!("gate.task.{}", t.name),
                2 * d,
                &cfg.gate_hidden,
                task_arity,
                GateKind::Softmax,
                cfg.head_init(),
            )
        })
        .collect::<Result<Vec<_>, _>>()?;

    let sg2 = if cfg.use_self_gate {
        Some(
            tasks
                .iter()
                .map(|t| {
                    GateUnit::new_self_gate(
                        &mut ctx,
                        &format!("sg.task.{}", t.name),
                        d,
                        &cfg.gate_hidden,
                        e,
                        cfg.head_init(),
                    )
                })
                .collect::<Result<Vec<_>, _>>()?,
        )
    } else {
        None
    };

    let towers = tasks
        .iter()
        .map(|t| {
            TowerUnit::new(
                &mut ctx,
                &format!("tower.{}", t.name),
                d,
                &cfg.tower_hidden,
                cfg.head_init(),
            )
        })
        .collect();

    Ok(Box::new(HomeModel {
        cfg: cfg.clone(),
        tasks: tasks.to_vec(),
        fg1,
        meta,
        meta_gates,
        sg1,
        fg2,
        fg2_task,
        l2_groups,
        l2_task,
        task_gates,
        sg2,
        towers,
        param_len: ctx.count(),
    }))
}

impl HomeModel {
    /// Names of experts in one layer-1 or layer-2 group, aligned with the
    /// order their outputs are listed in gate pools.
    fn group_names(layer: &str, group: &str, count: usize) -> Vec<String> {
        (0..count)
            .map(|i| format!("{layer}.{group}.e{i}"))
            .collect()
    }
}

impl Architecture for HomeModel {
    fn arch_name(&self) -> &'static str {
        "home"
    }

    fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    fn tasks(&self) -> &[TaskSpec] {
        &self.tasks
    }

    fn param_len(&self) -> usize {
        self.param_len
    }

    fn forward(
        &mut self,
        tape: &mut Tape,
        features: &Tensor,
        mode: Mode,
    ) -> Result<ForwardTrace, ModelError> {
        let e = self.cfg.experts_per_group;
        let mask = self.cfg.use_hierarchy_mask;
        let mut bind = Binding::new(self.param_len);
        let mut gates = Vec::new();
        let mut experts = Vec::new();
        let x = tape.constant(features.clone());

        // Layer 1: per-group (optionally feature-gated) inputs.
        let mut l1_inputs = [x; 3];
        if let Some(fg1) = &mut self.fg1 {
            for (gi, fg) in fg1.iter_mut().enumerate() {
                let (w, importance) = fg.forward(tape, &mut bind, x)?;
                gates.push(GateTrace {
                    name: format!("fg1.{}", GROUPS[gi]),
                    scope: GateScope::Feature(format!("meta.{}", GROUPS[gi])),
                    weights: w,
                    expert_names: Vec::new(),
                    row_stochastic: true,
                });
                l1_inputs[gi] = tape.mul(x, importance)?;
            }
        }

        let mut meta_outs: Vec<Vec<Var>> = Vec::new();
        for (gi, group) in self.meta.iter_mut().enumerate() {
            let mut outs = Vec::new();
            for (i, unit) in group.iter_mut().enumerate() {
                let out = unit.forward(tape, &mut bind, l1_inputs[gi], mode)?;
                outs.push(out.post_act);
                experts.push(ExpertTrace {
                    name: format!("l1.{}.e{i}", GROUPS[gi]),
                    role: ExpertRole::Meta(GROUPS[gi].to_string()),
                    pre_act: out.pre_act,
                    post_act: out.post_act,
                });
            }
            meta_outs.push(outs);
        }

        // Meta gates mix their visible pools; gate input is the raw v.
        let mut z = Vec::with_capacity(3);
        for gi in 0..3 {
            let (pool, names): (Vec<Var>, Vec<String>) = if mask && gi != SHARED {
                (
                    meta_outs[SHARED]
                        .iter()
                        .chain(&meta_outs[gi])
                        .copied()
                        .collect(),
                    [
                        Self::group_names("l1", GROUPS[SHARED], e),
                        Self::group_names("l1", GROUPS[gi], e),
                    ]
                    .concat(),
                )
            } else {
                (
                    meta_outs.iter().flatten().copied().collect(),
                    GROUPS
                        .iter()
                        .flat_map(|g| Self::group_names("l1", g, e))
                        .collect(),
                )
            };
            let (w, mixed) = self.meta_gates[gi].mix(tape, &mut bind, x, &pool)?;
            gates.push(GateTrace {
                name: format!("gate.meta.{}", GROUPS[gi]),
                scope: GateScope::Meta(GROUPS[gi].to_string()),
                weights: w,
                expert_names: names,
                row_stochastic: true,
            });
            z.push(mixed);
        }

        // Residual self-gates over each group's own experts.
        if let Some(sg1) = &self.sg1 {
            for gi in 0..3 {
                let (w, self_mix) = sg1[gi].mix(tape, &mut bind, x, &meta_outs[gi])?;
                gates.push(GateTrace {
                    name: format!("sg.meta.{}", GROUPS[gi]),
                    scope: GateScope::SelfGate(format!("meta.{}", GROUPS[gi])),
                    weights: w,
                    expert_names: Self::group_names("l1", GROUPS[gi], e),
                    row_stochastic: e > 1,
                });
                z[gi] = tape.add(z[gi], self_mix)?;
            }
        }

        // Layer 2 group inputs: shared experts read the shared meta
        // representation, category and task experts read their category's.
        let mut l2_inputs = [z[SHARED], z[INTER], z[WATCH]];
        if let Some(fg2) = &mut self.fg2 {
            for (gi, fg) in fg2.iter_mut().enumerate() {
                let (w, importance) = fg.forward(tape, &mut bind, z[gi])?;
                gates.push(GateTrace {
                    name: format!("fg2.{}", GROUPS[gi]),
                    scope: GateScope::Feature(format!("l2.{}", GROUPS[gi])),
                    weights: w,
                    expert_names: Vec::new(),
                    row_stochastic: true,
                });
                l2_inputs[gi] = tape.mul(z[gi], importance)?;
            }
        }

        let mut l2_outs: Vec<Vec<Var>> = Vec::new();
        for (gi, group) in self.l2_groups.iter_mut().enumerate() {
            let mut outs = Vec::new();
            for (i, unit) in group.iter_mut().enumerate() {
                let out = unit.forward(tape, &mut bind, l2_inputs[gi], mode)?;
                outs.push(out.post_act);
                experts.push(ExpertTrace {
                    name: format!("l2.{}.e{i}", GROUPS[gi]),
                    role: match gi {
                        SHARED => ExpertRole::Shared,
                        INTER => ExpertRole::CategoryShared(TaskCategory::Interaction),
                        _ => ExpertRole::CategoryShared(TaskCategory::Watch),
                    },
                    pre_act: out.pre_act,
                    post_act: out.post_act,
                });
            }
            l2_outs.push(outs);
        }

        let mut task_inputs = Vec::with_capacity(self.tasks.len());
        for (ti, task) in self.tasks.iter().enumerate() {
            let zc = z[group_of(task.category)];
            let input = if let Some(fg2_task) = &mut self.fg2_task {
                let (w, importance) = fg2_task[ti].forward(tape, &mut bind, zc)?;
                gates.push(GateTrace {
                    name: format!("fg2.task.{}", task.name),
                    scope: GateScope::Feature(format!("l2.task.{}", task.name)),
                    weights: w,
                    expert_names: Vec::new(),
                    row_stochastic: true,
                });
                tape.mul(zc, importance)?
            } else {
                zc
            };
            task_inputs.push(input);
        }

        let mut task_outs: Vec<Vec<Var>> = Vec::new();
        for ((task, group), input) in self.tasks.iter().zip(&mut self.l2_task).zip(&task_inputs) {
            let mut outs = Vec::new();
            for (i, unit) in group.iter_mut().enumerate() {
                let out = unit.forward(tape, &mut bind, *input, mode)?;
                outs.push(out.post_act);
                experts.push(ExpertTrace {
                    name: format!("l2.task.{}.e{i}", task.name),
                    role: ExpertRole::Specific(task.name.clone()),
                    pre_act: out.pre_act,
                    post_act: out.post_act,
                });
            }
            task_outs.push(outs);
        }

        // Task mixtures and towers.
        let mut task_probs = Vec::new();
        for (ti, task) in self.tasks.iter().enumerate() {
            let cat = group_of(task.category);
            let gate_in = tape.concat(&[z[cat], z[SHARED]], 1)?;
            let (pool, names): (Vec<Var>, Vec<String>) = if mask {
                (
                    l2_outs[SHARED]
                        .iter()
                        .chain(&l2_outs[cat])
                        .chain(&task_outs[ti])
                        .copied()
                        .collect(),
                    [
                        Self::group_names("l2", GROUPS[SHARED], e),
                        Self::group_names("l2", GROUPS[cat], e),
                        Self::group_names("l2.task", &task.name, e),
                    ]
                    .concat(),
                )
            } else {
                let mut pool: Vec<Var> = l2_outs.iter().flatten().copied().collect();
                let mut names: Vec<String> = GROUPS
                    .iter()
                    .flat_map(|g| Self::group_names("l2", g, e))
                    .collect();
                for (t, outs) in self.tasks.iter().zip(&task_outs) {
                    pool.extend(outs.iter().copied());
                    names.extend(Self::group_names("l2.task", &t.name, e));
                }
                (pool, names)
            };
            let (w, mut mixed) = self.task_gates[ti].mix(tape, &mut bind, gate_in, &pool)?;
            gates.push(GateTrace {
                name: format!("gate.task.{}", task.name),
                scope: GateScope::Task(task.name.clone()),
                weights: w,
                expert_names: names,
                row_stochastic: true,
            });

            if let Some(sg2) = &self.sg2 {
                let (w, self_mix) = sg2[ti].mix(tape, &mut bind, z[cat], &task_outs[ti])?;
                gates.push(GateTrace {
                    name: format!("sg.task.{}", task.name),
                    scope: GateScope::SelfGate(format!("task.{}", task.name)),
                    weights: w,
                    expert_names: Self::group_names("l2.task", &task.name, e),
                    row_stochastic: e > 1,
                });
                mixed = tape.add(mixed, self_mix)?;
            }

            let prob = self.towers[ti].forward(tape, &mut bind, mixed)?;
            task_probs.push((task.name.clone(), prob));
        }

        Ok(ForwardTrace {
            binding: bind,
            task_probs,
            gates,
            experts,
        })
    }

    fn visit_params(&mut self, f: &mut dyn FnMut(&mut Param)) {
        if let Some(fg1) = &mut self.fg1 {
            for fg in fg1 {
                fg.visit_params(f);
            }
        }
        for group in &mut self.meta {
            for e in group {
                e.visit_params(f);
            }
        }
        for g in &mut self.meta_gates {
            g.visit_params(f);
        }
        if let Some(sg1) = &mut self.sg1 {
            for g in sg1 {
                g.visit_params(f);
            }
        }
        if let Some(fg2) = &mut self.fg2 {
            for fg in fg2 {
                fg.visit_params(f);
            }
        }
        if let Some(fg2_task) = &mut self.fg2_task {
            for fg in fg2_task {
                fg.visit_params(f);
            }
        }
        for group in &mut self.l2_groups {
            for e in group {
                e.visit_params(f);
            }
        }
        for group in &mut self.l2_task {
            for e in group {
                e.visit_params(f);
            }
        }
        for g in &mut self.task_gates {
            g.visit_params(f);
        }
        if let Some(sg2) = &mut self.sg2 {
            for g in sg2 {
                g.visit_params(f);
            }
        }
        for t in &mut self.towers {
            t.visit_params(f);
        }
    }

    fn visit_bn_states(&mut self, f: &mut dyn FnMut(&str, &mut BnState)) {
        for group in &mut self.meta {
            for e in group {
                e.visit_bn_state(f);
            }
        }
        for group in &mut self.l2_groups {
            for e in group {
                e.visit_bn_state(f);
            }
        }
        for group in &mut self.l2_task {
            for e in group {
                e.visit_bn_state(f);
            }
        }
    }
}
