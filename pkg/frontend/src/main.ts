/** Vanilla-DOM console: session panel, workflow controls, plan editor with
 * live grade preview, navigation deviation overlay, robot panel, and
 * shot/report widgets. Every mutation is an API call; reloading the page
 * rebuilds the view entirely from the service. */

import { ApiClient, type ScrewPlan, type SessionView } from "./api.js";
import { deviationTrace, formatReadout } from "./deviation.js";
import {
  planEditorControl,
  robotAlignControl,
  robotConfirmControl,
  shotControl,
} from "./guards.js";

const api = new ApiClient(window.location.origin.replace(/\/$/, ""));

const EVENT_BUTTONS = [
  "PREOP_IMAGES_ACQUIRED",
  "PATIENT_INFO_SUBMITTED",
  "PLANNING_DONE",
  "PREP_DONE",
  "DRB_ATTACHED",
  "ROBOT_CART_POSITIONED",
  "CARM_CALIBRATOR_MOUNTED",
  "INTRAOP_IMAGES_ACQUIRED",
  "NAVIGATION_STARTED",
  "SCREW_PLACED",
  "VERIFICATION_IMAGES_ACQUIRED",
  "NEXT_SCREW",
  "PROCEDURE_COMPLETE",
];

let session: SessionView | null = null;
let selectedPlanId: string | null = null;

function el<K extends keyof HTMLElementTagNameMap>(
  tag: K,
  attrs: Record<string, string> = {},
  text = "",
): HTMLElementTagNameMap[K] {
  const node = document.createElement(tag);
  for (const [k, v] of Object.entries(attrs)) node.setAttribute(k, v);
  if (text) node.textContent = text;
  return node;
}

function banner(msg: string, kind: "info" | "error" = "info"): void {
  const box = document.getElementById("banner")!;
  box.textContent = msg;
  box.className = kind;
}

async function refresh(): Promise<void> {
  if (!session) return;
  session = await api.getSession(session.session_id);
  render();
}

function render(): void {
  const root = document.getElementById("app")!;
  root.replaceChildren();
  if (!session) {
    root.append(el("p", {}, "No active session. Create one above."));
    return;
  }
  const s = session;
  const head = el("div", { class: "session" });
  head.append(
    el("h2", {}, `Session ${s.session_id}`),
    el(
      "p",
      {},
      `state=${s.state} mode=${s.mode} modality=${s.modality} ` +
        `technique=${s.technique} shots=${s.shots_total}`,
    ),
  );
  root.append(head);

  // workflow controls
  const wfBox = el("div", { class: "panel" });
  wfBox.append(el("h3", {}, "Workflow"));
  for (const ev of EVENT_BUTTONS) {
    const btn = el("button", {}, ev);
    btn.onclick = async () => {
      try {
        session = await api.postEvent(s.session_id, ev, eventPayload(ev));
        banner(`applied ${ev}`);
        render();
      } catch (err) {
        banner(String(err), "error");
      }
    };
    wfBox.append(btn);
  }
  root.append(wfBox);

  root.append(renderPlanEditor(s));
  root.append(renderNavigation(s));
  root.append(renderRobot(s));
  root.append(renderShots(s));
}

function eventPayload(ev: string): object {
  if (ev === "SCREW_PLACED") {
    return {
      screw_id: selectedPlanId ?? "screw",
      grade: "A",
      breach_depth_mm: 0.0,
    };
  }
  return {};
}

function renderPlanEditor(s: SessionView): HTMLElement {
  const box = el("div", { class: "panel" });
  box.append(el("h3", {}, "Screw plans"));
  const guard = planEditorControl(s);
  if (!guard.enabled) {
    box.append(el("p", { class: "disabled" }, guard.reason));
  }
  const list = el("ul", { id: "plan-list" });
  box.append(list);
  void api.listPlans(s.session_id).then(({ plans }) => {
    for (const [pid, entry] of Object.entries(plans)) {
      const item = el(
        "li",
        {},
        `${pid}: ${entry.plan.vertebra}/${entry.plan.side} ` +
          `L=${entry.plan.length_mm}mm D=${entry.plan.diameter_mm}mm ` +
          (entry.preview ? `grade ${entry.preview.grade}` : "no preview"),
      );
      const pick = el("button", {}, "select");
      pick.onclick = () => {
        selectedPlanId = pid;
        banner(`selected plan ${pid}`);
      };
      item.append(pick);
      list.append(item);
    }
  });

  const form = el("div", { class: "plan-form" });
  const fields: Record<string, HTMLInputElement> = {};
  for (const [name, value] of [
    ["plan_id", "p1"],
    ["vertebra", "L3"],
    ["side", "left"],
    ["entry_mm", "18,-9,0"],
    ["direction", "-0.26,0.97,0"],
    ["length_mm", "40"],
    ["diameter_mm", "5"],
  ] as const) {
    const input = el("input", { value });
    fields[name] = input;
    const label = el("label", {}, `${name} `);
    label.append(input);
    form.append(label);
  }
  const save = el("button", {}, "save plan (live preview)") as HTMLButtonElement;
  save.disabled = !guard.enabled;
  save.onclick = async () => {
    const plan: ScrewPlan = {
      vertebra: fields["vertebra"]!.value,
      side: fields["side"]!.value,
      entry_mm: fields["entry_mm"]!.value.split(",").map(Number),
      direction: fields["direction"]!.value.split(",").map(Number),
      length_mm: Number(fields["length_mm"]!.value),
      diameter_mm: Number(fields["diameter_mm"]!.value),
    };
    const pid = fields["plan_id"]!.value;
    try {
      const existing = await api
        .getPlan(s.session_id, pid)
        .then(() => true)
        .catch(() => false);
      const res = existing
        ? await api.updatePlan(s.session_id, pid, plan)
        : await api.addPlan(s.session_id, pid, plan);
      banner(
        res.preview
          ? `plan ${pid}: grade ${res.preview.grade}, breach ` +
              `${res.preview.max_breach_depth_mm.toFixed(2)} mm`
          : `plan ${pid} saved`,
      );
      render();
    } catch (err) {
      banner(String(err), "error");
    }
  };
  form.append(save);
  box.append(form);
  return box;
}

function renderNavigation(s: SessionView): HTMLElement {
  const box = el("div", { class: "panel" });
  box.append(el("h3", {}, "Navigation"));
  const pre = el("pre", { id: "nav-trace" });
  const start = el("button", {}, "start stream") as HTMLButtonElement;
  start.disabled = s.state !== "NAVIGATION";
  start.onclick = async () => {
    try {
      await api.startNavigation(s.session_id, 30, 2);
      const frames = await api.fetchStream(s.session_id, false);
      const plans = await api.listPlans(s.session_id);
      const pid = selectedPlanId ?? Object.keys(plans.plans)[0];
      if (!pid) {
        banner("no plan to compare against", "error");
        return;
      }
      const trace = deviationTrace(frames, plans.plans[pid]!.plan);
      pre.textContent = trace.map(formatReadout).join("\n");
      const stale = trace.filter((r) => r.stale).length;
      banner(`stream done: ${trace.length} frames, ${stale} stale`);
    } catch (err) {
      banner(String(err), "error");
    }
  };
  box.append(start, pre);
  return box;
}

function renderRobot(s: SessionView): HTMLElement {
  const box = el("div", { class: "panel" });
  box.append(el("h3", {}, "Robot"));
  const alignGuard = robotAlignControl(s);
  const confirmGuard = robotConfirmControl(s);
  const align = el("button", {}, "align to plan") as HTMLButtonElement;
  align.disabled = !alignGuard.enabled;
  if (!alignGuard.enabled) box.append(el("p", { class: "disabled" }, alignGuard.reason));
  align.onclick = async () => {
    if (!selectedPlanId) {
      banner("select a plan first", "error");
      return;
    }
    try {
      const res = await api.robotAlign(s.session_id, selectedPlanId);
      banner(`aligned: ${res.waypoints} waypoints`);
      await refresh();
    } catch (err) {
      banner(String(err), "error");
    }
  };
  const confirm = el("button", {}, "confirm execution") as HTMLButtonElement;
  confirm.disabled = !confirmGuard.enabled;
  confirm.onclick = async () => {
    try {
      await api.robotConfirm(s.session_id);
      banner("trajectory executed");
      await refresh();
    } catch (err) {
      banner(String(err), "error");
    }
  };
  box.append(align, confirm);
  return box;
}

function renderShots(s: SessionView): HTMLElement {
  const box = el("div", { class: "panel" });
  box.append(el("h3", {}, "Shots & report"));
  const guard = shotControl(s);
  for (const phase of ["placement", "verification"] as const) {
    const btn = el("button", {}, `record ${phase} shot`) as HTMLButtonElement;
    btn.disabled = !guard.enabled;
    btn.onclick = async () => {
      try {
        const res = await api.recordShot(
          s.session_id,
          selectedPlanId ?? "screw",
          phase,
        );
        banner(`shots: screw ${res.screw_total}, session ${res.session_total}`);
        await refresh();
      } catch (err) {
        banner(String(err), "error");
      }
    };
    box.append(btn);
  }
  const report = el("button", {}, "fetch report");
  const out = el("pre", {});
  report.onclick = async () => {
    out.textContent = JSON.stringify(
      await api.getReport(s.session_id),
      null,
      2,
    );
  };
  box.append(report, out);
  return box;
}

function wireHeader(): void {
  const create = document.getElementById("create") as HTMLButtonElement;
  create.onclick = async () => {
    const mode = (document.getElementById("mode") as HTMLSelectElement).value;
    try {
      session = await api.createSession({ mode });
      banner(`created session ${session.session_id}`);
      render();
    } catch (err) {
      banner(String(err), "error");
    }
  };
}

wireHeader();
render();
