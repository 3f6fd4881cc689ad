import init, { staticCurve, essSummary, coverageCurve } from "./pkg/stopeval_demo.js";

const $ = (id) => document.getElementById(id);

function axes(ctx, w, h, pad, ymax, ylabel) {
  ctx.clearRect(0, 0, w, h);
  ctx.strokeStyle = "#888";
  ctx.beginPath();
  ctx.moveTo(pad, pad / 2);
  ctx.lineTo(pad, h - pad);
  ctx.lineTo(w - pad / 2, h - pad);
  ctx.stroke();
  ctx.fillStyle = "#444";
  ctx.fillText(ylabel, 4, pad / 2);
  ctx.fillText(ymax.toFixed(2), 4, pad / 2 + 12);
  ctx.fillText("0", pad - 12, h - pad);
}

function bars(canvas, values, ymax, labels, colors) {
  const ctx = canvas.getContext("2d");
  const { width: w, height: h } = canvas;
  const pad = 40;
  axes(ctx, w, h, pad, ymax, "");
  const slot = (w - 1.5 * pad) / values.length;
  values.forEach((stack, i) => {
    let y = h - pad;
    stack.forEach((v, j) => {
      const bh = (v / ymax) * (h - 1.5 * pad);
      ctx.fillStyle = colors[j];
      ctx.fillRect(pad + i * slot + slot * 0.15, y - bh, slot * 0.7, bh);
      y -= bh;
    });
    ctx.fillStyle = "#444";
    ctx.fillText(labels[i], pad + i * slot + slot * 0.4, h - pad + 14);
  });
}

function showError(el, e) {
  el.textContent = String(e);
  el.className = "error";
}

function runCurve() {
  const note = $("curve-note");
  try {
    const c = JSON.parse(staticCurve(+$("in-int").value, +$("post-int").value));
    const stacks = c.points.map((p) => [p.in_treatment, p.post_stop]);
    stacks.push([c.natural_course.in_treatment, c.natural_course.post_stop]);
    const labels = c.points.map((p) => `k=${p.stop_epoch}`).concat(["NC"]);
    const ymax = Math.max(...stacks.map((s) => s[0] + s[1]), 0.01);
    bars($("curve"), stacks, ymax, labels, ["#c44", "#48c"]);
    note.className = "";
    note.textContent = "red: in-treatment deaths, blue: post-stop deaths. ψ = " +
      c.points.map((p) => p.psi.toFixed(3)).join(", ") +
      `; natural course ${c.natural_course.psi.toFixed(3)}.`;
  } catch (e) {
    showError(note, e);
  }
}

function runEss() {
  const out = $("ess-out");
  try {
    const s = JSON.parse(essSummary($("weights").value));
    out.className = "";
    out.textContent =
      `n = ${s.n}\nCV = ${s.cv.toFixed(4)}\nESS = ${s.ess.toFixed(4)} (n/(1+CV²) = ${s.ess_identity.toFixed(4)})\nESS/n = ${s.ratio.toFixed(4)}`;
  } catch (e) {
    showError(out, e);
  }
}

function runCoverage() {
  const canvas = $("coverage");
  try {
    const pts = JSON.parse(coverageCurve(+$("cov-n").value, +$("cov-seed").value, +$("cov-k").value));
    bars(canvas, pts.map((p) => [p.rho ?? 0]), 1, pts.map((p) => `t=${p.epoch}`), ["#6a4"]);
  } catch (e) {
    const ctx = canvas.getContext("2d");
    ctx.clearRect(0, 0, canvas.width, canvas.height);
    ctx.fillStyle = "#b00";
    ctx.fillText(String(e), 10, 20);
  }
}

await init();
$("curve-run").onclick = runCurve;
$("ess-run").onclick = runEss;
$("cov-run").onclick = runCoverage;
runCurve();
runEss();
runCoverage();
