/** Workflow-guard mirror: which console controls are enabled in which
 * session state. The service enforces these rules; the console only uses
 * them to disable controls and explain why. */

import type { SessionView } from "./api.js";

export const PLAN_EDIT_STATES = new Set(["PLANNING", "NAVIGATION"]);
export const SHOT_STATES = new Set([
  "INTRAOP_IMAGING",
  "REGISTRATION",
  "NAVIGATION",
  "ROBOT_ALIGNED",
  "SCREW_PLACED",
  "VERIFICATION_IMAGING",
]);

export interface ControlState {
  enabled: boolean;
  reason: string;
}

const ok: ControlState = { enabled: true, reason: "" };

export function planEditorControl(s: SessionView): ControlState {
  if (!PLAN_EDIT_STATES.has(s.state)) {
    return {
      enabled: false,
      reason: `plan editing requires PLANNING or NAVIGATION (now ${s.state})`,
    };
  }
  return ok;
}

export function verificationControl(s: SessionView): ControlState {
  if (s.state !== "REGISTRATION") {
    return {
      enabled: false,
      reason: `probe verification requires REGISTRATION (now ${s.state})`,
    };
  }
  if (!s.registration_present) {
    return { enabled: false, reason: "no registration result on session" };
  }
  return ok;
}

export function navigationControl(s: SessionView): ControlState {
  if (s.state !== "NAVIGATION") {
    return {
      enabled: false,
      reason: `navigation view requires NAVIGATION (now ${s.state})`,
    };
  }
  return ok;
}

export function robotAlignControl(s: SessionView): ControlState {
  if (s.mode !== "ROBOT_ASSISTED") {
    return {
      enabled: false,
      reason: "robot panel disabled: session is NAVIGATION_ONLY",
    };
  }
  if (s.state !== "NAVIGATION") {
    return {
      enabled: false,
      reason: `robot alignment requires NAVIGATION (now ${s.state})`,
    };
  }
  return ok;
}

export function robotConfirmControl(s: SessionView): ControlState {
  if (s.mode !== "ROBOT_ASSISTED") {
    return {
      enabled: false,
      reason: "robot panel disabled: session is NAVIGATION_ONLY",
    };
  }
  if (s.state !== "ROBOT_ALIGNED") {
    return {
      enabled: false,
      reason: `confirm requires ROBOT_ALIGNED (now ${s.state})`,
    };
  }
  return ok;
}

export function shotControl(s: SessionView): ControlState {
  if (!SHOT_STATES.has(s.state)) {
    return {
      enabled: false,
      reason: `shot recording is illegal in ${s.state}`,
    };
  }
  return ok;
}
