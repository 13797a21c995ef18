import init, { run_odometry, qr_pattern, prior_equivalence } from "../pkg/swba_demo.js";

const $ = (id) => document.getElementById(id);

function clearCanvas(canvas) {
  const ctx = canvas.getContext("2d");
  ctx.clearRect(0, 0, canvas.width, canvas.height);
  return ctx;
}

function drawAxes(ctx, canvas, title) {
  ctx.strokeStyle = "#bbb";
  ctx.strokeRect(0.5, 0.5, canvas.width - 1, canvas.height - 1);
  ctx.fillStyle = "#444";
  ctx.font = "12px sans-serif";
  ctx.fillText(title, 8, 14);
}

// Top-down (x, y) plot of truth and aligned estimate.
function plotTrajectory(data) {
  const canvas = $("traj");
  const ctx = clearCanvas(canvas);
  drawAxes(ctx, canvas, "trajectory (top-down)  truth=grey  estimate=blue");
  const pts = data.truth.concat(data.estimate);
  if (pts.length === 0) return;
  let xmin = Infinity, xmax = -Infinity, ymin = Infinity, ymax = -Infinity;
  for (const p of pts) {
    xmin = Math.min(xmin, p[0]); xmax = Math.max(xmax, p[0]);
    ymin = Math.min(ymin, p[1]); ymax = Math.max(ymax, p[1]);
  }
  const pad = 24;
  const sx = (canvas.width - 2 * pad) / Math.max(xmax - xmin, 1e-9);
  const sy = (canvas.height - 2 * pad) / Math.max(ymax - ymin, 1e-9);
  const s = Math.min(sx, sy);
  const tx = (p) => pad + (p[0] - xmin) * s;
  const ty = (p) => canvas.height - pad - (p[1] - ymin) * s;
  const poly = (points, style, width) => {
    ctx.strokeStyle = style;
    ctx.lineWidth = width;
    ctx.beginPath();
    points.forEach((p, i) => (i === 0 ? ctx.moveTo(tx(p), ty(p)) : ctx.lineTo(tx(p), ty(p))));
    ctx.stroke();
  };
  poly(data.truth, "#999", 2.5);
  poly(data.estimate, "#1565c0", 1.3);
}

// Signed symmetric-log scale for eigenvalues spanning many decades.
function symlog(v, linthresh) {
  const a = Math.abs(v);
  if (a <= linthresh) return v / linthresh;
  return Math.sign(v) * (1 + Math.log10(a / linthresh));
}

function plotSigma(data) {
  const canvas = $("sigma");
  const ctx = clearCanvas(canvas);
  drawAxes(ctx, canvas, "smallest eigenvalue of prior Hessian (symlog, lin<1e-8)");
  const events = data.events.filter((e) => e.sigma_min !== null);
  if (events.length === 0) return;
  const lin = 1e-8;
  const vals = events.map((e) => symlog(e.sigma_min, lin));
  const vmax = Math.max(...vals.map(Math.abs), 1);
  const pad = 26;
  const sx = (canvas.width - 2 * pad) / Math.max(events.length - 1, 1);
  const sy = (canvas.height - 2 * pad) / (2 * vmax);
  const ty = (v) => canvas.height / 2 - v * sy;
  ctx.strokeStyle = "#ddd";
  ctx.beginPath();
  ctx.moveTo(pad, ty(0));
  ctx.lineTo(canvas.width - pad, ty(0));
  ctx.stroke();
  ctx.strokeStyle = "#c62828";
  ctx.lineWidth = 1.4;
  ctx.beginPath();
  vals.forEach((v, i) => (i === 0 ? ctx.moveTo(pad + i * sx, ty(v)) : ctx.lineTo(pad + i * sx, ty(v))));
  ctx.stroke();
  const last = events[events.length - 1].sigma_min;
  ctx.fillStyle = "#c62828";
  ctx.fillText(`final: ${last.toExponential(2)}`, canvas.width - 140, 28);
}

const PROBE_KEYS = ["tx", "ty", "tz", "roll", "pitch", "yaw", "random"];
const PROBE_COLORS = ["#1565c0", "#2e7d32", "#6a1b9a", "#ef6c00", "#c62828", "#00838f", "#555"];

function plotProbes(data) {
  const canvas = $("probes");
  const ctx = clearCanvas(canvas);
  drawAxes(ctx, canvas, "gauge probes  |dE| per event (log scale)  gauge dirs: " + data.gauge_labels.join(", "));
  const events = data.events;
  if (events.length === 0) return;
  const pad = 30;
  const floor = 1e-16;
  const logv = (v) => Math.log10(Math.max(Math.abs(v), floor));
  let lmin = Infinity, lmax = -Infinity;
  for (const e of events) for (const k of PROBE_KEYS) {
    const v = logv(e[k]);
    lmin = Math.min(lmin, v); lmax = Math.max(lmax, v);
  }
  if (lmax - lmin < 1) lmax = lmin + 1;
  const sx = (canvas.width - 2 * pad) / Math.max(events.length - 1, 1);
  const sy = (canvas.height - 2 * pad) / (lmax - lmin);
  const ty = (v) => canvas.height - pad - (v - lmin) * sy;
  PROBE_KEYS.forEach((key, ki) => {
    ctx.strokeStyle = PROBE_COLORS[ki];
    ctx.lineWidth = key === "random" ? 2 : 1.1;
    ctx.beginPath();
    events.forEach((e, i) => {
      const y = ty(logv(e[key]));
      i === 0 ? ctx.moveTo(pad + i * sx, y) : ctx.lineTo(pad + i * sx, y);
    });
    ctx.stroke();
    ctx.fillStyle = PROBE_COLORS[ki];
    ctx.fillText(key, pad + 52 * ki, canvas.height - 8);
  });
}

function runOdometry() {
  const status = $("run-status");
  status.textContent = "running…";
  status.classList.remove("fail");
  setTimeout(() => {
    try {
      const json = run_odometry(
        $("preset").value, $("gauge").value, $("opt").value, $("marg").value,
        $("precision").value, Number($("frames").value), Number($("seed").value),
        Number($("noise").value));
      const data = JSON.parse(json);
      plotTrajectory(data);
      plotSigma(data);
      plotProbes(data);
      if (data.failed) {
        status.textContent = `numeric failure: ${data.failure_reason}`;
        status.classList.add("fail");
      } else {
        status.textContent = `ATE ${data.ate.toExponential(3)} m over ${data.estimate.length} poses`;
      }
    } catch (e) {
      status.textContent = `error: ${e}`;
      status.classList.add("fail");
    }
  }, 10);
}

function drawPattern(canvas, pattern, rows, cols, title, caption) {
  const ctx = clearCanvas(canvas);
  drawAxes(ctx, canvas, title);
  const pad = 22;
  const cell = Math.min((canvas.width - 2 * pad) / cols, (canvas.height - 2 * pad - 18) / rows);
  for (let i = 0; i < rows; i++) {
    for (let j = 0; j < cols; j++) {
      const x = pad + j * cell, y = pad + i * cell;
      ctx.strokeStyle = "#eee";
      ctx.strokeRect(x, y, cell, cell);
      if (pattern[i * cols + j]) {
        ctx.fillStyle = "#1565c0";
        ctx.fillRect(x + 1, y + 1, cell - 2, cell - 2);
      }
    }
  }
  ctx.fillStyle = "#444";
  ctx.fillText(caption, pad, pad + rows * cell + 14);
}

function runQr() {
  const status = $("qr-status");
  try {
    const json = qr_pattern(
      Number($("qr-rows").value), Number($("qr-cols").value),
      Number($("qr-rank").value), Number($("qr-lead").value),
      Number($("qr-seed").value));
    const d = JSON.parse(json);
    drawPattern($("qr-standard"), d.standard, d.rows, d.cols,
      "standard Householder R", `${d.standard_nonzero_rows} nonzero rows`);
    drawPattern($("qr-flat"), d.flat, d.rows, d.cols,
      "flat R", `rank ${d.flat_total_rank} (svd: ${d.svd_rank}), leading-block rank ${d.flat_lead_rank}`);
    status.textContent = "";
  } catch (e) {
    status.textContent = `error: ${e}`;
  }
}

function runEquivalence() {
  const status = $("eq-status");
  try {
    const json = prior_equivalence(
      Number($("eq-keep").value), Number($("eq-rows").value),
      $("eq-deficient").checked, Number($("eq-seed").value));
    const d = JSON.parse(json);
    const table = $("eq-table");
    table.hidden = false;
    table.innerHTML = "<tr><th></th><th>value</th></tr>" + [
      ["relative Hessian difference |J'J - H_sc| / |H_sc|", d.hessian_rel_err.toExponential(3)],
      ["relative gradient difference", d.gradient_rel_err.toExponential(3)],
      ["square-root prior rows (= prior rank)", d.qr_prior_rows],
      ["marginalized-block rank (flat QR)", d.marg_rank_qr],
      ["marginalized-block rank (SVD oracle)", d.marg_rank_svd],
      ["Moore-Penrose inverse used", d.pseudo_inverse_used],
    ].map(([k, v]) => `<tr><td style="text-align:left">${k}</td><td>${v}</td></tr>`).join("");
    status.textContent = "";
  } catch (e) {
    status.textContent = `error: ${e}`;
  }
}

async function main() {
  await init();
  $("run").addEventListener("click", runOdometry);
  $("qr-run").addEventListener("click", runQr);
  $("eq-run").addEventListener("click", runEquivalence);
  runQr();
}

main();
