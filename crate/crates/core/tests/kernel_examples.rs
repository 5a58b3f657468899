use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use xpnn::bench::RunMetrics;
use xpnn::kernels::{KernelError, KernelPlan, LayerData, Variant};
use xpnn::{ConvGeometry, RequantParams};

const SHIFT: u32 = 14;

fn data(g: ConvGeometry, bits: u32, seed: u64) -> LayerData {
    LayerData::random(g, bits, SHIFT, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
}

/// Expected im2col words for output pixel `(oy, ox)`, built from the packed input.
fn im2col_row(d: &LayerData, oy: usize, ox: usize) -> Vec<u32> {
    let g = &d.geom;
    let cb = g.c_in * d.input.bits() as usize / 8;
    let mut bytes = Vec::new();
    for fy in 0..g.f {
        for fx in 0..g.f {
            let iy = (oy * g.stride + fy) as isize - g.pad as isize;
            let ix = (ox * g.stride + fx) as isize - g.pad as isize;
            if iy < 0 || ix < 0 || iy >= g.h_in as isize || ix >= g.w_in as isize {
                bytes.extend(std::iter::repeat_n(0u8, cb));
            } else {
                let at = (iy as usize * g.w_in + ix as usize) * cb;
                bytes.extend_from_slice(&d.input.data[at..at + cb]);
            }
        }
    }
    bytes.chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect()
}

/// Runs on one core and compares the buffers left by the last pixel block.
fn check_im2col(v: Variant, bits: u32, g: ConvGeometry) -> Vec<Vec<u32>> {
    let d = data(g, bits, 3);
    let plan = KernelPlan::new(v, bits, g, 1, SHIFT).unwrap();
    let (run, cl) = plan.run_keep(&d, 16, 1 << 26).unwrap();
    assert_eq!(run.output, d.golden().unwrap());
    let kw = g.k() * bits as usize / 32;
    let (oy, ox0) = (g.h_out() - 1, g.w_out() - v.pixels());
    let mut rows = Vec::new();
    for p in 0..v.pixels() {
        let got = cl.tcdm().read_words(plan.layout.buffers + (4 * kw * p) as u32, kw).unwrap();
        let want = im2col_row(&d, oy, ox0 + p);
        assert_eq!(got, want, "{v} pixel ({oy}, {})", ox0 + p);
        rows.push(got);
    }
    rows
}

#[test]
fn im2col_of_a_one_by_one_filter_copies_the_pixel() {
    let g = ConvGeometry::same(4, 4, 32, 8, 1);
    let rows = check_im2col(Variant::Simd4x2, 8, g);
    let d = data(g, 8, 3);
    assert_eq!(rows[1], d.input.data[d.input.data.len() - 32..].chunks(4).map(|c| u32::from_le_bytes(c.try_into().unwrap())).collect::<Vec<_>>());
}

#[test]
fn im2col_interior_pixel_is_filter_major_channel_minor() {
    let g = ConvGeometry { h_in: 6, w_in: 6, c_in: 32, c_out: 8, f: 3, stride: 1, pad: 0 };
    check_im2col(Variant::Nn4x4, 4, g);
    check_im2col(Variant::Cu4x2, 8, g);
}

#[test]
fn im2col_border_pixel_is_zero_filled() {
    let rows = check_im2col(Variant::Nn4x2, 2, ConvGeometry::same(4, 4, 64, 4, 3));
    // bottom-right corner: the last filter row and column fall in the padding
    let tw = 64 * 2 / 32;
    let last = &rows[1];
    assert!(last[6 * tw..].iter().all(|&w| w == 0));
    assert!(last[2 * tw..3 * tw].iter().all(|&w| w == 0));
    check_im2col(Variant::Simd4x2, 8, ConvGeometry { h_in: 8, w_in: 8, c_in: 32, c_out: 4, f: 3, stride: 2, pad: 1 });
}

#[test]
fn identity_parameters_give_clipped_accumulators() {
    let g = ConvGeometry::same(4, 4, 32, 8, 3);
    for bits in [8, 4] {
        let mut d = data(g, bits, 11);
        d.params = vec![RequantParams::identity(); g.c_out];
        let x = d.input.values();
        let w = d.weights.values();
        let hi = (1 << bits) - 1;
        let mut want = Vec::new();
        for oy in 0..4isize {
            for ox in 0..4isize {
                for k in 0..g.c_out {
                    let mut acc = 0;
                    for fy in 0..3isize {
                        for fx in 0..3isize {
                            let (iy, ix) = (oy + fy - 1, ox + fx - 1);
                            if (0..4).contains(&iy) && (0..4).contains(&ix) {
                                for c in 0..32 {
                                    let wi = ((k * 3 + fy as usize) * 3 + fx as usize) * 32 + c;
                                    acc += x[(iy as usize * 4 + ix as usize) * 32 + c] * w[wi];
                                }
                            }
                        }
                    }
                    want.push(acc.clamp(0, hi));
                }
            }
        }
        for v in [Variant::Simd4x2, Variant::Nn4x4] {
            let run = KernelPlan::new(v, bits, g, 1, 0).unwrap().run(&d, 16, 1 << 24).unwrap();
            assert_eq!(run.output.values(), want, "{v} {bits}-bit");
        }
    }
}

#[test]
fn requant_cost_does_not_depend_on_precision() {
    let g = ConvGeometry::same(8, 8, 64, 16, 3);
    for v in [Variant::Simd4x2, Variant::Cu4x2, Variant::Nn4x2, Variant::Nn4x4] {
        let len = |bits| {
            let p = KernelPlan::new(v, bits, g, 1, SHIFT).unwrap();
            p.image.symbol("grp_end").unwrap() - p.image.symbol("rq_begin").unwrap()
        };
        assert_eq!(len(8), len(4), "{v}");
        assert_eq!(len(8), len(2), "{v}");
    }
}

#[test]
fn inner_loop_mixes() {
    let g = ConvGeometry::same(4, 4, 32, 8, 3);
    let mix = |v| KernelPlan::new(v, 8, g, 1, SHIFT).unwrap().inner_loop_mix();
    let simd = mix(Variant::Simd4x2);
    assert_eq!((simd.simd_mac, simd.load, simd.total()), (8, 6, 14));
    let cu = mix(Variant::Cu4x2);
    assert_eq!((cu.mac_load, cu.load, cu.total()), (8, 2, 10));
    let nn2 = mix(Variant::Nn4x2);
    assert_eq!((nn2.mac_load, nn2.load, nn2.total()), (8, 1, 9));
    let nn4 = mix(Variant::Nn4x4);
    assert_eq!((nn4.mac_load, nn4.load, nn4.total()), (16, 1, 17));
}

#[test]
fn compute_and_update_loop_accesses_memory_every_instruction() {
    let g = ConvGeometry::same(8, 8, 32, 16, 3);
    let plan = KernelPlan::new(Variant::Cu4x2, 8, g, 8, SHIFT).unwrap();
    let mix = plan.inner_loop_mix();
    assert_eq!(mix.load + mix.mac_load, mix.total());
    let run = plan.run(&data(g, 8, 5), 16, 1 << 26).unwrap();
    assert!(run.report.aggregate.contention_stalls > 0);
    assert!(run.report.aggregate.mem_requests >= run.inner.retired);
}

#[test]
fn plain_simd_at_four_bits_halves_the_iterations() {
    let g = ConvGeometry::same(4, 4, 64, 8, 3);
    let inner = |bits| {
        let plan = KernelPlan::new(Variant::Simd4x2, bits, g, 1, SHIFT).unwrap();
        let run = plan.run(&data(g, bits, 2), 16, 1 << 24).unwrap();
        assert_eq!(plan.inner_loop_mix().total(), 14);
        run.inner.retired
    };
    assert_eq!(inner(8), 2 * inner(4));
    assert_eq!(inner(4), 2 * inner(2));
}

#[test]
fn small_random_layer_matches_golden() {
    let g = ConvGeometry::same(4, 4, 8, 8, 3);
    for bits in [8, 4] {
        let d = data(g, bits, 21);
        let want = d.golden().unwrap();
        for v in Variant::ALL.into_iter().filter(|v| v.supports(bits)) {
            let run = KernelPlan::new(v, bits, g, 1, SHIFT).unwrap().run(&d, 16, 1 << 24).unwrap();
            assert_eq!(run.output, want, "{v} {bits}-bit");
        }
    }
    // eight 2-bit channels fill half a word
    assert!(matches!(KernelPlan::new(Variant::Nn4x4, 2, g, 1, SHIFT), Err(KernelError::Geometry(_))));
}

#[test]
fn results_do_not_depend_on_bank_count() {
    let g = ConvGeometry::same(8, 8, 32, 16, 3);
    let d = data(g, 4, 8);
    let plan = KernelPlan::new(Variant::Nn4x4, 4, g, 8, SHIFT).unwrap();
    let dumps: Vec<_> = [8, 16, 32]
        .iter()
        .map(|&b| {
            let (run, cl) = plan.run_keep(&d, b, 1 << 26).unwrap();
            (run.cycles(), cl.tcdm().dump(), run.output)
        })
        .collect();
    for w in dumps.windows(2) {
        assert_eq!(w[0].2, w[1].2);
        assert_eq!(w[0].1, w[1].1);
    }
    assert!(dumps[0].0 > dumps[2].0);
}

#[test]
fn sixteen_rows_on_eight_cores_deal_two_each() {
    let g = ConvGeometry::same(16, 16, 32, 64, 3);
    let d = data(g, 8, 1);
    let run = KernelPlan::new(Variant::Nn4x4, 8, g, 8, SHIFT).unwrap().run(&d, 16, 1 << 26).unwrap();
    assert_eq!(run.output, d.golden().unwrap());
    let kw = (g.k() * 8 / 32) as u64;
    for c in &run.report.per_core {
        assert_eq!(c.simd_macs, 2 * 16 * 64 * kw);
    }
    let m = RunMetrics::from_run(&run);
    assert!(m.core_imbalance < 0.05, "imbalance {}", m.core_imbalance);
}

#[test]
fn eight_cores_on_eight_times_the_work_scale_near_linearly() {
    for v in [Variant::Simd4x2, Variant::Nn4x4] {
        let one = ConvGeometry::same(2, 16, 32, 64, 3);
        let eight = ConvGeometry::same(16, 16, 32, 64, 3);
        let single = KernelPlan::new(v, 8, one, 1, SHIFT).unwrap().run(&data(one, 8, 4), 16, 1 << 26).unwrap();
        let multi = KernelPlan::new(v, 8, eight, 8, SHIFT).unwrap().run(&data(eight, 8, 4), 16, 1 << 26).unwrap();
        let ratio = multi.cycles() as f64 / single.cycles() as f64;
        assert!(ratio <= 1.15, "{v}: {ratio}");
    }
}
