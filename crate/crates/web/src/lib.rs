//! Browser demo bindings: generate and draw graphs, query pair
//! connectivity, and train the two-token transformer live in the page.
//!
//! Build with `wasm-pack build crates/web --target web` and serve
//! `crates/web/www/`. These are thin wasm-bindgen shims; the logic lives in
//! [`session`] and [`layout`] and is unit-tested on the host.

mod layout;
mod session;

use wasm_bindgen::prelude::*;

fn js_err(error: String) -> JsValue {
    JsValue::from_str(&error)
}

/// SVG drawing of a generated graph. `param` is the grid dimensionality or
/// the chain count; `highlight < 0` disables reachability shading.
#[wasm_bindgen]
pub fn graph_svg(
    family: &str,
    n: usize,
    param: usize,
    seed: u64,
    highlight: i32,
) -> Result<String, JsValue> {
    session::graph_svg(family, n, param, seed, u32::try_from(highlight).ok()).map_err(js_err)
}

/// JSON report for one ordered node pair: label, class, hop distances both
/// ways, and (for grids) the digit vectors and their difference.
#[wasm_bindgen]
pub fn pair_report(
    family: &str,
    n: usize,
    param: usize,
    seed: u64,
    start: u32,
    goal: u32,
) -> Result<String, JsValue> {
    session::pair_report(family, n, param, seed, start, goal).map_err(js_err)
}

/// An interactive training session; JavaScript drives it a few epochs at a
/// time and re-renders the returned SVG curves.
#[wasm_bindgen]
pub struct TrainingDemo {
    inner: session::DemoSession,
}

#[wasm_bindgen]
impl TrainingDemo {
    #[wasm_bindgen(constructor)]
    pub fn new(
        family: &str,
        n: usize,
        param: usize,
        d_emb: usize,
        epochs: usize,
        seed: u64,
    ) -> Result<TrainingDemo, JsValue> {
        session::DemoSession::new(family, n, param, d_emb, epochs, seed)
            .map(|inner| TrainingDemo { inner })
            .map_err(js_err)
    }

    /// Runs up to `epochs` more epochs; returns the new records as JSON.
    pub fn step(&mut self, epochs: usize) -> Result<String, JsValue> {
        self.inner.step(epochs).map_err(js_err)
    }

    pub fn finished(&self) -> bool {
        self.inner.finished()
    }

    /// Train/test accuracy curves recorded so far, as SVG.
    pub fn accuracy_svg(&self) -> Result<String, JsValue> {
        self.inner.accuracy_svg().map_err(js_err)
    }

    /// Train/test loss curves recorded so far, as SVG.
    pub fn loss_svg(&self) -> Result<String, JsValue> {
        self.inner.loss_svg().map_err(js_err)
    }
}
