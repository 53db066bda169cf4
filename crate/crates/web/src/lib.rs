//! WebAssembly bindings for the browser demo. Requests and responses are JSON strings.

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod demo;

use wasm_bindgen::prelude::*;

use crate::demo::{DemoSession, RowRequest, SampleRequest};

fn js_err(e: impl std::fmt::Display) -> JsError {
    JsError::new(&e.to_string())
}

#[wasm_bindgen]
pub struct Demo {
    session: DemoSession,
}

#[wasm_bindgen]
impl Demo {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u64) -> Result<Demo, JsError> {
        Ok(Demo { session: DemoSession::new(seed).map_err(js_err)? })
    }

    /// `[{t, alpha_bar, carbon_kept}, …]` for `t = 0..=steps`.
    #[wasm_bindgen(js_name = scheduleCurve)]
    pub fn schedule_curve(&self, steps: usize) -> Result<String, JsError> {
        let curve = self.session.schedule_curve(steps).map_err(js_err)?;
        serde_json::to_string(&curve).map_err(js_err)
    }

    /// Generates a guided batch; see [`SampleRequest`] for the fields.
    pub fn sample(&self, request: &str) -> Result<String, JsError> {
        let req: SampleRequest = serde_json::from_str(request).map_err(js_err)?;
        let out = self.session.sample(&req).map_err(js_err)?;
        serde_json::to_string(&out).map_err(js_err)
    }

    /// One guided update of a single atom row; see [`RowRequest`].
    #[wasm_bindgen(js_name = guideRow)]
    pub fn guide_row(&self, request: &str) -> Result<String, JsError> {
        let req: RowRequest = serde_json::from_str(request).map_err(js_err)?;
        let out = self.session.guide_row(&req).map_err(js_err)?;
        serde_json::to_string(&out).map_err(js_err)
    }
}
