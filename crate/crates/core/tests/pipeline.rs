use std::path::Path;

use limbfit::eval::{mpjpe, VisibilityMask};
use limbfit::flow::{nn_flow, rigid_part_flow};
use limbfit::io::{parse_ply, ply_string};
use limbfit::losses::Sequence;
use limbfit::optim::{fit_sequence, OptimConfig};
use limbfit::segmentation::{propagate_labels, segment_sequence, PartTemplate, SegmentationConfig};
use limbfit::synth::{generate_sequence, CapsuleBody, SynthConfig, SyntheticSequence};
use limbfit::{LossConfig, PointCloud, SoftAssignment, Vec3};

fn sequence(index: u64, frames: usize) -> SyntheticSequence {
    generate_sequence(&CapsuleBody::default_body(), &SynthConfig { frames, ..Default::default() }, 11, index).unwrap()
}

fn labels(c: &PointCloud) -> Vec<usize> {
    c.gt_label.clone().unwrap()
}

#[test]
fn ply_round_trip_keeps_nine_significant_digits() {
    let s = sequence(0, 3);
    let c = &s.frames[1].cloud;
    let back = parse_ply(&ply_string(c).unwrap(), Path::new("mem.ply")).unwrap();
    assert_eq!(back.len(), c.len());
    assert_eq!(back.gt_label, c.gt_label);
    let close = |a: &[Vec3], b: &[Vec3]| a.iter().zip(b).all(|(x, y)| (x - y).norm() <= 1e-8 * x.norm().max(1.0));
    assert!(close(&back.points, &c.points));
    assert!(close(back.forward_flow.as_ref().unwrap(), c.forward_flow.as_ref().unwrap()));
    assert!(close(back.backward_flow.as_ref().unwrap(), c.backward_flow.as_ref().unwrap()));
}

#[test]
fn kmeans_segments_are_mostly_single_part() {
    let body = CapsuleBody::default_body();
    let mut purity = Vec::new();
    for idx in 0..4 {
        let s = sequence(idx, 3);
        let topo = s.body.topology();
        let clouds: Vec<PointCloud> = s.frames.iter().map(|f| f.cloud.clone()).collect();
        let w =
            segment_sequence(&clouds, topo, &PartTemplate::from_body(&body), &SegmentationConfig::default()).unwrap();
        for (c, w) in clouds.iter().zip(&w) {
            let k = topo.num_classes();
            let mut table = vec![vec![0usize; k]; k];
            for (p, g) in w.argmax().iter().zip(labels(c)) {
                table[*p][g] += 1;
            }
            let majority: usize = table.iter().map(|r| r.iter().max().unwrap()).sum();
            purity.push(majority as f64 / c.len() as f64);
        }
    }
    let mean = purity.iter().sum::<f64>() / purity.len() as f64;
    assert!(mean >= 0.6, "mean purity {mean:.3}");
}

#[test]
fn rigid_part_flow_beats_nearest_neighbour() {
    let (mut rigid, mut nn, mut mag) = (0.0, 0.0, 0.0);
    for idx in 0..4 {
        let s = sequence(idx, 2);
        let (a, b) = (&s.frames[0].cloud, &s.frames[1].cloud);
        let gt = a.forward_flow.as_ref().unwrap();
        let err = |f: &[Vec3]| f.iter().zip(gt).map(|(x, y)| (x - y).norm()).sum::<f64>() / gt.len() as f64;
        rigid += err(&rigid_part_flow(a, &labels(a), b, &labels(b)).unwrap().forward);
        nn += err(&nn_flow(a, b).unwrap().forward);
        mag += gt.iter().map(|v| v.norm()).sum::<f64>() / gt.len() as f64;
    }
    assert!(rigid < nn, "rigid {rigid:.4} vs nearest neighbour {nn:.4}");
    assert!(nn < mag, "nearest neighbour {nn:.4} vs flow magnitude {mag:.4}");
}

#[test]
fn fitting_from_ground_truth_stays_close() {
    let s = sequence(2, 3);
    let topo = s.body.topology().clone();
    let clouds: Vec<PointCloud> = s.frames.iter().map(|f| f.cloud.clone()).collect();
    let w: Vec<SoftAssignment> =
        clouds.iter().map(|c| SoftAssignment::one_hot(&labels(c), topo.num_classes()).unwrap()).collect();
    let gt: Vec<_> = s.frames.iter().map(|f| f.pose.clone()).collect();
    let seq = Sequence::new(topo, clouds, w).unwrap();
    // Stage-2 weights would pull joints toward visible-surface centroids; these do not.
    let fit =
        fit_sequence(&seq, &gt, &LossConfig::supplementary(), &OptimConfig { iterations: 50, ..Default::default() })
            .unwrap();
    assert!(fit.best().total <= fit.initial().total);
    for (p, f) in fit.poses.iter().zip(&s.frames) {
        let e = mpjpe(p, &f.pose, &VisibilityMask(f.visibility.clone())).unwrap();
        assert!(e < 0.03, "drifted {e:.4} m from ground truth");
    }
}

/// For each ground-truth part, the share of frames whose majority cluster matches frame 0's.
fn majority_fraction(s: &SyntheticSequence, seed: u64) -> f64 {
    let pts: Vec<Vec<Vec3>> = s.frames.iter().map(|f| f.cloud.points.clone()).collect();
    let labs = propagate_labels(&pts, s.body.topology().limbs().len(), seed, 100).unwrap();
    let classes = s.body.topology().num_classes();
    let majority = |t: usize, part: usize| -> Option<usize> {
        let mut counts = vec![0usize; labs[t].k()];
        for (g, l) in labels(&s.frames[t].cloud).iter().zip(&labs[t].labels) {
            if *g == part {
                counts[*l] += 1;
            }
        }
        let (best, n) = counts.iter().enumerate().max_by_key(|(_, n)| **n).unwrap();
        (*n > 0).then_some(best)
    };
    let (mut same, mut total) = (0, 0);
    for part in 0..classes {
        let Some(first) = majority(0, part) else { continue };
        for t in 1..s.frames.len() {
            if let Some(m) = majority(t, part) {
                total += 1;
                same += usize::from(m == first);
            }
        }
    }
    same as f64 / total as f64
}

#[test]
fn tracked_parts_keep_their_majority_cluster() {
    let fractions: Vec<f64> = (0..3).map(|i| majority_fraction(&sequence(i, 16), i)).collect();
    println!("majority fractions {fractions:.3?}");
    let mean = fractions.iter().sum::<f64>() / fractions.len() as f64;
    assert!(mean >= 0.5, "mean majority fraction {mean:.3}");
}
