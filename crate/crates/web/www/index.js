import init, { Demo } from "./pkg/molguide_web.js";

const $ = (id) => document.getElementById(id);
const ATOM_COLORS = { C: "#444", N: "#2d5be3", O: "#d33", F: "#2a2" };
let demo;

function fail(err) {
  $("status").textContent = String(err.message ?? err);
  $("status").className = "error";
}

function plotSchedule() {
  const steps = Number($("sched-steps").value);
  const curve = JSON.parse(demo.scheduleCurve(steps));
  const cv = $("sched");
  const ctx = cv.getContext("2d");
  const pad = 30;
  const w = cv.width - 2 * pad;
  const h = cv.height - 2 * pad;
  ctx.clearRect(0, 0, cv.width, cv.height);
  ctx.strokeStyle = "#999";
  ctx.strokeRect(pad, pad, w, h);
  ctx.fillStyle = "#222";
  ctx.fillText("0", pad - 12, pad + h + 4);
  ctx.fillText("1", pad - 12, pad + 4);
  ctx.fillText(`t = ${steps}`, pad + w - 30, pad + h + 16);
  const series = [
    ["alpha_bar", "#2d5be3", "ᾱ(t)"],
    ["carbon_kept", "#d33", "P(C stays C)"],
  ];
  series.forEach(([key, color, label], s) => {
    ctx.strokeStyle = color;
    ctx.beginPath();
    curve.forEach((p, i) => {
      const x = pad + (w * p.t) / steps;
      const y = pad + h * (1 - p[key]);
      i === 0 ? ctx.moveTo(x, y) : ctx.lineTo(x, y);
    });
    ctx.stroke();
    ctx.fillStyle = color;
    ctx.fillText(label, pad + w - 90, pad + 14 + 14 * s);
  });
}

function drawMolecule(mol) {
  const cv = document.createElement("canvas");
  cv.width = cv.height = 110;
  if (!mol.valid) cv.className = "invalid";
  const ctx = cv.getContext("2d");
  const n = mol.atoms.length;
  const pos = mol.atoms.map((_, i) => {
    const a = (2 * Math.PI * i) / n - Math.PI / 2;
    const r = n === 1 ? 0 : 35;
    return [55 + r * Math.cos(a), 50 + r * Math.sin(a)];
  });
  for (const [i, j, order] of mol.bonds) {
    const [x1, y1] = pos[i];
    const [x2, y2] = pos[j];
    const dx = y2 - y1;
    const dy = x1 - x2;
    const len = Math.hypot(dx, dy) || 1;
    for (let k = 0; k < order; k++) {
      const off = (k - (order - 1) / 2) * 4;
      ctx.beginPath();
      ctx.moveTo(x1 + (off * dx) / len, y1 + (off * dy) / len);
      ctx.lineTo(x2 + (off * dx) / len, y2 + (off * dy) / len);
      ctx.stroke();
    }
  }
  ctx.font = "bold 13px sans-serif";
  ctx.textAlign = "center";
  ctx.textBaseline = "middle";
  mol.atoms.forEach((sym, i) => {
    const [x, y] = pos[i];
    ctx.fillStyle = "#fff";
    ctx.beginPath();
    ctx.arc(x, y, 8, 0, 2 * Math.PI);
    ctx.fill();
    ctx.fillStyle = ATOM_COLORS[sym] ?? "#000";
    ctx.fillText(sym, x, y);
  });
  ctx.fillStyle = "#555";
  ctx.font = "11px sans-serif";
  ctx.fillText(mol.property.toFixed(2), 55, 102);
  return cv;
}

function runSample() {
  const req = {
    guide: $("s-guide").value,
    target: Number($("s-target").value),
    lambda: Number($("s-lambda").value),
    count: Number($("s-count").value),
    steps: Number($("s-steps").value),
    seed: Number($("s-seed").value),
    at_xtm1: $("s-xtm1").checked,
  };
  $("s-summary").textContent = "Sampling…";
  setTimeout(() => {
    try {
      const out = JSON.parse(demo.sample(JSON.stringify(req)));
      $("s-summary").textContent =
        `${out.property}: ${out.mean.toFixed(3)} ± ${out.std.toFixed(3)}, ${out.pct_valid.toFixed(1)}% valid`;
      $("s-summary").className = "";
      $("s-mols").replaceChildren(...out.molecules.map(drawMolecule));
      $("s-sdf").textContent = out.sdf;
    } catch (err) {
      $("s-summary").textContent = String(err.message ?? err);
      $("s-summary").className = "error";
    }
  }, 0);
}

const ROW_DEFAULT = [1, 1, 7, 1];

function rowSliders() {
  $("r-sliders").replaceChildren(
    ...["C", "N", "O", "F"].map((sym, k) => {
      const label = document.createElement("label");
      label.textContent = `${sym} `;
      const input = document.createElement("input");
      input.type = "range";
      input.min = "0";
      input.max = "10";
      input.step = "0.1";
      input.value = String(ROW_DEFAULT[k]);
      input.id = `r-${k}`;
      input.addEventListener("input", updateRow);
      label.append(input);
      return label;
    }),
  );
}

function updateRow() {
  const req = {
    row: [0, 1, 2, 3].map((k) => Number($(`r-${k}`).value)),
    guide: $("r-guide").value,
    target: Number($("r-target").value),
    lambda: Number($("r-lambda").value),
  };
  const table = $("r-table");
  try {
    const out = JSON.parse(demo.guideRow(JSON.stringify(req)));
    const fmt = (v) => v.toFixed(4);
    const rows = [
      ["", ...out.symbols],
      ["p", ...out.input.map(fmt)],
      ["∇", ...out.gradient.map(fmt)],
      ["within-row ∇", ...out.tangent.map(fmt)],
      ["full ∇", ...out.raw.map(fmt)],
    ];
    table.innerHTML = rows
      .map((r, i) => `<tr>${r.map((c) => (i === 0 ? `<th>${c}</th>` : `<td>${c}</td>`)).join("")}</tr>`)
      .join("");
  } catch (err) {
    table.innerHTML = `<tr><td class="error">${err.message ?? err}</td></tr>`;
  }
}

async function main() {
  await init();
  demo = new Demo(0n);
  $("status").textContent = "Ready.";
  $("sched-go").addEventListener("click", plotSchedule);
  $("s-go").addEventListener("click", runSample);
  for (const id of ["r-guide", "r-target", "r-lambda"]) $(id).addEventListener("input", updateRow);
  rowSliders();
  plotSchedule();
  updateRow();
}

main().catch(fail);
