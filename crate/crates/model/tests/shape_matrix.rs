//! Encoder dimensions across a grid of sizes, including widths far above
//! the desk defaults, so shape arithmetic is not tuned to one setting.

use strata_model::{ModelConfig, VisualEncoder};
use strata_tensor::rng::stream;
use strata_tensor::{Binder, ParamStore, Tape};

use rand::Rng;

fn cfg_for(grid: usize, d: usize) -> ModelConfig {
    let mut c = ModelConfig::desk();
    c.d = d;
    c.heads = 4;
    c.patch = 4;
    c.image_h = grid * c.patch;
    c.image_w = grid * c.patch;
    c.vdm_k = 1;
    c.validate().unwrap();
    c
}

#[test]
fn encoder_output_is_tokens_by_width_across_the_matrix() {
    for grid in [4usize, 8, 14] {
        for d in [32usize, 64, 512] {
            let c = cfg_for(grid, d);
            assert_eq!(c.n_patches(), grid * grid);
            let enc = VisualEncoder::new(&c);
            let mut ps = ParamStore::<f32>::new(grid_seed(grid, d));
            enc.declare(&mut ps).unwrap();
            let tape = Tape::new();
            let bd = Binder::new(&tape, &ps);
            let mut rng = stream(9, "shape-pix");
            let pixels: Vec<f32> = (0..c.image_h * c.image_w)
                .map(|_| rng.random_range(0.0..1.0))
                .collect();
            let f_v = enc.encode(&bd, &pixels, &c, None).unwrap();
            assert_eq!(
                (f_v.rows(), f_v.cols()),
                (grid * grid, d),
                "grid={grid}, d={d}"
            );
            let v = f_v.value();
            assert!(v.data().iter().all(|x| x.is_finite()), "grid={grid}, d={d}");
        }
    }
}

fn grid_seed(grid: usize, d: usize) -> u64 {
    (grid * 1000 + d) as u64
}
