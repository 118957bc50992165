/** Tool-vs-plan deviation readouts for the navigation overlay.
 *
 * Display-only vector arithmetic over values the service streamed: the tool
 * pose (its +z column is the tool axis) and the active screw plan. All
 * grading and registration geometry stays server-side. */

import type { ScrewPlan, StreamFrame, Transform } from "./api.js";

export interface DeviationReadout {
  tMs: number;
  /** DRB (or tool) occluded: overlay must freeze with a stale indicator. */
  stale: boolean;
  /** Perpendicular distance from the tool tip to the planned axis line, mm. */
  lateralMm: number | null;
  /** Angle between tool axis and planned direction, degrees. */
  angularDeg: number | null;
}

function sub(a: number[], b: number[]): number[] {
  return [a[0]! - b[0]!, a[1]! - b[1]!, a[2]! - b[2]!];
}

function dot(a: number[], b: number[]): number {
  return a[0]! * b[0]! + a[1]! * b[1]! + a[2]! * b[2]!;
}

function norm(a: number[]): number {
  return Math.sqrt(dot(a, a));
}

export function toolAxis(pose: Transform): number[] {
  // third column of the rotation matrix
  return [pose.rotation[0]![2]!, pose.rotation[1]![2]!, pose.rotation[2]![2]!];
}

export function deviationFromPose(
  pose: Transform,
  plan: ScrewPlan,
): { lateralMm: number; angularDeg: number } {
  const d = plan.direction;
  const dUnit = d.map((x) => x / norm(d));
  const rel = sub(pose.translation, plan.entry_mm);
  const along = dot(rel, dUnit);
  const perp = sub(rel, dUnit.map((x) => x * along));
  const axis = toolAxis(pose);
  const cos = Math.min(1, Math.max(-1, dot(axis, dUnit) / norm(axis)));
  return {
    lateralMm: norm(perp),
    angularDeg: (Math.acos(cos) * 180) / Math.PI,
  };
}

/** Deviation trace for a replayed or live frame sequence. Occluded frames
 * carry no pose: readouts are null and the stale flag is set. */
export function deviationTrace(
  frames: StreamFrame[],
  plan: ScrewPlan,
  space: "drb" | "image" = "drb",
): DeviationReadout[] {
  return frames.map((f) => {
    const pose = space === "drb" ? f.tool_in_drb : f.tool_in_image;
    if (!f.visible || pose === null) {
      return { tMs: f.t_ms, stale: true, lateralMm: null, angularDeg: null };
    }
    const d = deviationFromPose(pose, plan);
    return {
      tMs: f.t_ms,
      stale: false,
      lateralMm: d.lateralMm,
      angularDeg: d.angularDeg,
    };
  });
}

/** Fixed-precision rendering so two identical traces produce identical
 * display strings (determinism is checked at display precision). */
export function formatReadout(r: DeviationReadout): string {
  if (r.stale) return `t=${r.tMs.toFixed(1)}ms STALE`;
  return (
    `t=${r.tMs.toFixed(1)}ms ` +
    `lateral=${r.lateralMm!.toFixed(3)}mm ` +
    `angle=${r.angularDeg!.toFixed(3)}deg`
  );
}
