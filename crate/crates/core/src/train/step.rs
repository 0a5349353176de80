use std::collections::BTreeMap;

use super::{TrainConfig, TrainError, TrainState};
use crate::autograd::{Graph, Var};
use crate::data::{Modality, PairBatch, Spectrum, TripletBatch};
use crate::losses::{adv_disc_loss_node, adv_gen_loss_node, rec_loss_node, total_loss, triplet_loss_node, AdvTerms, LossReport};
use crate::model::{Mode, ModelParams, Network, SubNetwork};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepRates {
    pub main: f64,
    pub disc: f64,
}

/// Per-step diagnostics besides the losses.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct StepStats {
    /// L2 norm of the applied gradient, by sub-network prefix.
    pub grad_norms: BTreeMap<String, f64>,
}

fn rows<'a>(spectra: impl IntoIterator<Item = &'a Spectrum>) -> Vec<&'a [f64]> {
    spectra.into_iter().map(|s| s.values.as_slice()).collect()
}

fn accumulate_norms(stats: &mut StepStats, grads: &BTreeMap<String, Tensor>, include: impl Fn(SubNetwork) -> bool) {
    for (name, g) in grads {
        if let Some(net) = SubNetwork::of(name).filter(|n| include(*n)) {
            *stats.grad_norms.entry(net.prefix().to_string()).or_default() += g.sum_squares();
        }
    }
}

/// Translation outputs of the main graph: inputs, reconstructions and transforms.
struct Translation {
    x: [Var; 2],
    rec: [Var; 2],
    /// `fake[i]`: generated spectrum of modality `i` from the other modality.
    fake: [Var; 2],
}

fn translate(net: &mut Network, p: &ModelParams, pair: &PairBatch) -> Translation {
    let x1 = net.input_rows(&rows(&pair.m1));
    let x2 = net.input_rows(&rows(&pair.m2));
    let e1 = net.encode(&p.e1, "e1", x1);
    let e2 = net.encode(&p.e2, "e2", x2);
    let rec1 = net.decode(&p.g1, "g1", &e1);
    let rec2 = net.decode(&p.g2, "g2", &e2);
    let fake1 = net.decode(&p.g1, "g1", &e2);
    let fake2 = net.decode(&p.g2, "g2", &e1);
    Translation { x: [x1, x2], rec: [rec1, rec2], fake: [fake1, fake2] }
}

/// Sum of triplet losses per batch, averaged over batches.
fn triplet_term<'a>(net: &mut Network, p: &ModelParams, batches: &'a [TripletBatch], alpha: f64) -> Var {
    // Gather every member per modality so each encoder and the Siamese network run once.
    let mut by_mod: [Vec<&[f64]>; 2] = [Vec::new(), Vec::new()];
    let mut roles = Vec::new();
    for b in batches {
        let other = b.anchor_modality.other();
        let mut place = |m: Modality, items: &'a [Spectrum]| {
            let start = by_mod[m.index()].len();
            by_mod[m.index()].extend(rows(items));
            (m, start)
        };
        let a = place(b.anchor_modality, &b.anchors);
        let pos = place(other, &b.positives);
        let neg = place(other, &b.negatives);
        roles.push((a, pos, neg, b.len()));
    }
    let mut bottlenecks = Vec::new();
    for m in Modality::BOTH {
        if by_mod[m.index()].is_empty() {
            continue;
        }
        let x = net.input_rows(&by_mod[m.index()]);
        let (enc, name) = match m {
            Modality::M1 => (&p.e1, "e1"),
            Modality::M2 => (&p.e2, "e2"),
        };
        bottlenecks.push(net.encode(enc, name, x).bottleneck);
    }
    let joint = net.graph.concat_batch(&bottlenecks);
    let z = net.embed(&p.s, "s", joint, p.config.siamese_input_channels());
    // M2 rows follow M1 rows when both are present
    let offset = |m: Modality| if m == Modality::M2 { by_mod[0].len() } else { 0 };
    let mut terms = Vec::new();
    for ((am, a0), (pm, p0), (nm, n0), k) in roles {
        let a = net.graph.slice_rows(z, offset(am) + a0, k);
        let pv = net.graph.slice_rows(z, offset(pm) + p0, k);
        let nv = net.graph.slice_rows(z, offset(nm) + n0, k);
        terms.push(triplet_loss_node(net.graph, a, pv, nv, alpha));
    }
    let w = 1.0 / terms.len() as f64;
    let weighted: Vec<(Var, f64)> = terms.into_iter().map(|t| (t, w)).collect();
    net.graph.weighted_sum(&weighted)
}

/// One optimization step: a discriminator update on real versus detached
/// generated spectra, then an update of encoders, decoders and the Siamese
/// network on the weighted total with the updated discriminators held fixed.
pub fn train_step(
    state: &mut TrainState,
    cfg: &TrainConfig,
    pair: &PairBatch,
    triplets: &[TripletBatch],
    rates: StepRates,
) -> Result<(LossReport, StepStats), TrainError> {
    if triplets.is_empty() || triplets.iter().any(|t| t.is_empty() || !t.is_valid()) {
        return Err(TrainError::InvalidConfig("invalid triplet batch".into()));
    }
    let w = &cfg.weights;
    let with_translation = (w.uses_translation() || cfg.compute_inactive_terms) && !pair.is_empty();
    let step = state.step_in_epoch;
    let epoch = state.epoch;
    let non_finite = |term| TrainError::NonFiniteLoss { term, epoch, step };
    let mut report = LossReport::default();
    let mut stats = StepStats::default();

    let mut g = Graph::new();
    let params = state.params.clone();
    let mut net = Network::new(&mut g, Mode::Train);
    let tr = with_translation.then(|| translate(&mut net, &params, pair));
    let trip = triplet_term(&mut net, &params, triplets, w.alpha);

    if let Some(tr) = &tr {
        // phase 1: discriminators on real versus detached generated spectra
        let mut dg = Graph::new();
        let mut dnet = Network::new(&mut dg, Mode::Train);
        let mut disc = Vec::new();
        for (i, (d, name)) in [(&params.d1, "d1"), (&params.d2, "d2")].into_iter().enumerate() {
            let real = dnet.graph.input(g.value(tr.x[i]).clone());
            let fake = dnet.graph.input(g.value(tr.fake[i]).clone());
            let lr = dnet.discriminate(d, name, real);
            let lf = dnet.discriminate(d, name, fake);
            disc.push(adv_disc_loss_node(dnet.graph, lr, lf));
        }
        report.adv[0].disc_loss = dg.value(disc[0]).item();
        report.adv[1].disc_loss = dg.value(disc[1]).item();
        if let Some(term) = [("disc_1", report.adv[0].disc_loss), ("disc_2", report.adv[1].disc_loss)]
            .into_iter()
            .find(|(_, v)| !v.is_finite())
            .map(|(n, _)| n)
        {
            return Err(non_finite(term));
        }
        let dloss = dg.weighted_sum(&[(disc[0], w.gamma1), (disc[1], w.gamma6)]);
        let grads = dg.param_grads(&dg.backward(dloss));
        accumulate_norms(&mut stats, &grads, SubNetwork::is_discriminator);
        state.adam_disc.update(&cfg.adam, &mut state.params, &grads, rates.disc, SubNetwork::is_discriminator);
        state.params.apply_bn_observations(dg.bn_observations(), cfg.bn_momentum, SubNetwork::is_discriminator);
    }

    // phase 2: generator-side losses against the updated discriminators
    let updated = state.params.clone();
    let mut net = Network::new(&mut g, Mode::Train);
    let mut terms = vec![(trip, w.gamma7)];
    let mut gen_vals = [0.0; 2];
    if let Some(tr) = &tr {
        let mut gens = Vec::new();
        for (i, (d, name)) in [(&updated.d1, "d1"), (&updated.d2, "d2")].into_iter().enumerate() {
            let logits = net.discriminate(d, name, tr.fake[i]);
            gens.push(adv_gen_loss_node(net.graph, logits));
        }
        let rec1 = rec_loss_node(net.graph, tr.rec[0], tr.x[0]);
        let rec2 = rec_loss_node(net.graph, tr.rec[1], tr.x[1]);
        let cross12 = rec_loss_node(net.graph, tr.fake[0], tr.x[0]);
        let cross21 = rec_loss_node(net.graph, tr.fake[1], tr.x[1]);
        terms.extend([
            (gens[0], w.gamma1),
            (gens[1], w.gamma6),
            (cross12, w.gamma2),
            (cross21, w.gamma5),
            (rec1, w.gamma3),
            (rec2, w.gamma4),
        ]);
        report.rec_1 = g.value(rec1).item();
        report.rec_2 = g.value(rec2).item();
        report.cross_12 = g.value(cross12).item();
        report.cross_21 = g.value(cross21).item();
        gen_vals = [g.value(gens[0]).item(), g.value(gens[1]).item()];
    }
    report.adv[0] = AdvTerms { gen_loss: gen_vals[0], ..report.adv[0] };
    report.adv[1] = AdvTerms { gen_loss: gen_vals[1], ..report.adv[1] };
    report.triplet = g.value(trip).item();
    report.total = total_loss(&report, w).map_err(|_| non_finite(report.non_finite_term().unwrap_or("total")))?;
    if let Some(term) = report.non_finite_term() {
        return Err(non_finite(term));
    }

    let total = g.weighted_sum(&terms);
    let grads = g.param_grads(&g.backward(total));
    let main = |s: SubNetwork| !s.is_discriminator();
    accumulate_norms(&mut stats, &grads, main);
    state.adam_main.update(&cfg.adam, &mut state.params, &grads, rates.main, main);
    state.params.apply_bn_observations(g.bn_observations(), cfg.bn_momentum, main);
    for v in stats.grad_norms.values_mut() {
        *v = v.sqrt();
    }
    state.step_in_epoch += 1;
    Ok((report, stats))
}
